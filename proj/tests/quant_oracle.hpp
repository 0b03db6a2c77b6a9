// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference checks for the quantizer, shared by the unit and
// acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "moe/common.hpp"
#include "moe/quant.hpp"

namespace moe::test {

// Bit-at-a-time packer, LSB-first.
inline std::vector<std::uint8_t> ref_pack(const std::vector<std::uint32_t>& codes, unsigned bits) {
  std::vector<std::uint8_t> out((codes.size() * bits + 7) / 8, 0);
  std::size_t pos = 0;
  for (auto c : codes)
    for (unsigned b = 0; b < bits; ++b, ++pos)
      if ((c >> b) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
  return out;
}

inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, Rng& rng, float lo = -1.0f,
                             float hi = 1.0f) {
  Matrix m(rows, cols);
  for (auto& v : m.data) v = lo + (hi - lo) * static_cast<float>(rng.uniform());
  return m;
}

struct BoundCheck {
  double worst_excess = -std::numeric_limits<double>::infinity();  // max(err - bound)
  double max_error = 0.0;
  std::size_t checked = 0;
};

// Per-element check of |w - w_hat| <= s/2 + |z - z_hat|, where z is the true
// group minimum after row padding and s, z_hat come from the stored block.
// The slack covers fp32 arithmetic and the fp16 scale snapping tolerance.
inline BoundCheck check_round_trip_bound(const Matrix& w, const QuantizedBlock& block) {
  const Matrix back = dequantize(block);
  const std::size_t g = block.scheme.group_size;
  const std::size_t pc = block.padded_cols();
  const double levels = static_cast<double>((1u << block.scheme.bits) - 1u);
  BoundCheck out;
  for (std::size_t r = 0; r < w.rows; ++r) {
    for (std::size_t c0 = 0; c0 < pc; c0 += g) {
      const std::size_t group = (r * pc + c0) / g;
      double z = std::numeric_limits<double>::infinity();
      for (std::size_t c = c0; c < c0 + g; ++c) z = std::min<double>(z, w.at(r, std::min(c, w.cols - 1)));
      const double s = block.group_scale(group);
      const double zhat = block.group_zero(group);
      for (std::size_t c = c0; c < std::min(c0 + g, w.cols); ++c) {
        const double x = w.at(r, c);
        const double err = std::abs(x - static_cast<double>(back.at(r, c)));
        const double slack = levels * s / 16384.0 +
                             4.0 * std::numeric_limits<float>::epsilon() *
                                 (std::abs(x) + std::abs(zhat) + levels * s);
        const double bound = s / 2.0 + std::abs(z - zhat) + slack;
        out.worst_excess = std::max(out.worst_excess, err - bound);
        out.max_error = std::max(out.max_error, err);
        ++out.checked;
      }
    }
  }
  return out;
}

// Bits per weight measured by serializing a reference tensor and counting
// bytes after the fixed header.
inline double counted_bits_per_param(const QuantScheme& scheme) {
  const std::size_t rows = 8, cols = 4 * scheme.scale_group_size;
  Rng rng(99);
  const auto block = quantize(uniform_matrix(rows, cols, rng), scheme);
  const std::size_t header = 1 + 1 + 4 + 4 + 1 + 1 + 2 * 8 + 4;
  const auto bytes = serialize(block);
  return static_cast<double>(bytes.size() - header) * 8.0 / static_cast<double>(rows * cols);
}

// Packs every sequence of eight 3-bit codes, back to back behind 0..7 filler
// codes, so each window starts at every bit phase, and checks that unpacking
// restores it. Returns the number of mismatching chunks.
inline std::size_t exhaustive_3bit_windows() {
  constexpr unsigned kBits = 3;
  constexpr std::uint32_t kWindows = 1u << 24;  // 8^8
  constexpr std::uint32_t kChunk = 1u << 14;
  std::size_t failures = 0;
  std::vector<std::uint32_t> codes;
  for (unsigned phase = 0; phase < 8; ++phase) {
    for (std::uint32_t base = 0; base < kWindows; base += kChunk) {
      codes.assign(static_cast<std::size_t>(kChunk) * 8 + phase, 5u);
      for (std::uint32_t w = 0; w < kChunk; ++w)
        for (unsigned i = 0; i < 8; ++i)
          codes[phase + w * 8 + i] = ((base + w) >> (kBits * i)) & 7u;
      const auto packed = pack_bits(codes, kBits);
      if (packed.size() != (codes.size() * kBits + 7) / 8 ||
          unpack_bits(packed, kBits, codes.size()) != codes)
        ++failures;
    }
  }
  return failures;
}

}  // namespace moe::test
