// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0
//
// Affine group quantization with packed n-bit codes.
//
// Per group of `group_size` consecutive weights: a zero point z (the group
// minimum) quantized to `meta_bits`. Per scale group of `scale_group_size`
// weights: one fp16 scale shared by its groups and one fp16 zero offset z0
// from which the zero codes are measured.
//
//   code  = clamp(round((w - z) / s), 0, 2^bits - 1)
//   z_hat = z0 + zcode * zstep,  zstep = max(s * 2^(bits - meta_bits), 2 * ulp16(z0))
//   w_hat = s * code + z_hat
//
// Serialized block (little-endian, bit streams LSB-first within each byte):
//   u8 version(1) | u8 bits | u32 group_size | u32 scale_group_size |
//   u8 meta_bits | u8 ndims | u64 dims[ndims] | u32 pad_count |
//   codes  ceil(n_padded * bits / 8) bytes
//   zeros  ceil(n_groups * meta_bits / 8) bytes
//   scales n_scale_groups * {u16 scale, u16 zero_offset}

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moe/tensor.hpp"

namespace moe {

std::uint16_t half_from_float(float x);  // round to nearest even
float half_to_float(std::uint16_t h);

struct QuantScheme {
  unsigned bits = 4;
  std::size_t group_size = 64;
  std::size_t scale_group_size = 256;
  unsigned meta_bits = 8;
  unsigned scale_storage_bits = 16;

  bool passthrough() const { return bits == 16; }
  void validate() const;
  std::string label() const;  // "FP16", "4-bit", ...

  // 16 -> FP16; 4 -> g64/sg256; 3 -> g64/sg128; 2 -> g16/sg128.
  static QuantScheme preset(unsigned bits);

  friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

struct QuantizedBlock {
  QuantScheme scheme;
  std::vector<std::size_t> shape;  // {rows, cols} of the original matrix
  std::uint32_t pad_count = 0;     // per-row padding up to a multiple of group_size
  std::vector<std::uint8_t> packed_codes;
  std::vector<std::uint8_t> zeros;     // packed meta_bits zero codes, one per group
  std::vector<std::uint16_t> scales;   // {scale, zero_offset} per scale group

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }
  std::size_t padded_cols() const { return cols() + pad_count; }
  std::size_t num_groups() const { return rows() * padded_cols() / scheme.group_size; }
  std::size_t groups_per_scale_group() const {
    return scheme.scale_group_size / scheme.group_size;
  }
  std::size_t num_scale_groups() const;

  float group_scale(std::size_t group) const;
  float group_zero(std::size_t group) const;  // dequantized zero point z_hat
  std::uint32_t code(std::size_t padded_index) const;

  // Bytes of codes + zeros + scales, excluding the header.
  std::size_t payload_bytes() const;

  friend bool operator==(const QuantizedBlock&, const QuantizedBlock&) = default;
};

std::vector<std::uint8_t> pack_bits(std::span<const std::uint32_t> codes, unsigned bits);
std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> packed, unsigned bits,
                                       std::size_t count);

QuantizedBlock quantize(const Matrix& w, const QuantScheme& scheme);
Matrix dequantize(const QuantizedBlock& block);

std::vector<std::uint8_t> serialize(const QuantizedBlock& block);
QuantizedBlock deserialize(std::span<const std::uint8_t> bytes);

// Average stored bits per weight including all metadata, from the layout.
double bits_per_param(const QuantScheme& scheme);

struct ArchSpec {
  std::string name;
  double experts_params = 0;
  double attention_params = 0;
  double embedding_params = 0;
  double lm_head_params = 0;
  double gate_params = 0;
  double norm_params = 0;

  double total() const {
    return experts_params + attention_params + embedding_params + lm_head_params + gate_params +
           norm_params;
  }
  double experts_fraction() const { return total() > 0 ? experts_params / total() : 0.0; }

  static ArchSpec mixtral8x7b();
};

struct MixedQuantConfig {
  QuantScheme attn_scheme = QuantScheme::preset(16);
  QuantScheme expert_scheme = QuantScheme::preset(16);
  std::vector<std::string> fp16_layers{"embeddings", "lm_head", "moe_gates", "layer_norms"};

  void validate() const;
};

struct SizeRow {
  std::string component;
  double params = 0;
  double bits_per_param = 0;
  double gib = 0;
};

struct SizeReport {
  std::vector<SizeRow> rows;
  double total_gib = 0;
  double experts_fraction = 0;
};

SizeReport model_size_report(const ArchSpec& arch, const MixedQuantConfig& config);

}  // namespace moe
