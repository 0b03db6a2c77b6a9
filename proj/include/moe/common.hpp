// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>

namespace moe {

// Identity of one expert's weight block.
struct ExpertKey {
  std::uint32_t layer = 0;
  std::uint32_t expert = 0;

  friend auto operator<=>(const ExpertKey&, const ExpertKey&) = default;
  friend bool operator==(const ExpertKey&, const ExpertKey&) = default;
};

std::string to_string(const ExpertKey& key);

// SplitMix64-seeded xoshiro256**. Sampling helpers are hand-rolled so streams
// are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a, used for stable content digests.
std::uint64_t fnv1a64(const void* data, std::size_t size,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t value);

}  // namespace moe

template <>
struct std::hash<moe::ExpertKey> {
  std::size_t operator()(const moe::ExpertKey& k) const noexcept {
    return (static_cast<std::size_t>(k.layer) << 32) ^ k.expert;
  }
};
