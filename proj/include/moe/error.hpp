// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace moe {

enum class ErrorCode {
  kInvalidArgument,
  kNonFinite,
  kOutOfRange,
  kUnknownKey,
  kCorrupt,
  kIo,
  kUnsupported,
  kDiverged,
};

std::string_view to_string(ErrorCode code);

// All library failures surface as this exception; `code()` is stable for
// callers that need to branch on the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace moe
