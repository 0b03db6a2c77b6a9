// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace moe::cli {

// Exit codes: 0 success, 1 runtime error, 2 usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

int run(int argc, char** argv);

}  // namespace moe::cli
