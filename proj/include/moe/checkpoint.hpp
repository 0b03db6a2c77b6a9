// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0
//
// Model checkpoint file:
//   "MOEL1"
//   u32 config_len, config JSON (canonical ModelConfig)
//   u32 manifest_len, manifest JSON [{"name","shape","offset"}...]
//   raw little-endian f32 tensor data; offsets are relative to this section.
//
// Quantized checkpoint file, same framing with magic "MOEQ1". The manifest is
// {"scheme": {...}, "tensors": [...]}; expert tensors are stored as one
// serialized QuantizedBlock of shape 1 x 3*d_model*d_ffn with an extra
// "length" field, all other tensors as f32.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moe/model.hpp"
#include "moe/quant.hpp"

namespace moe {

inline constexpr char kCheckpointMagic[] = "MOEL1";

std::vector<std::uint8_t> encode_checkpoint(const Model& model);
Model decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

inline constexpr char kQuantCheckpointMagic[] = "MOEQ1";

struct LoadedModel {
  Model model;  // expert weights dequantized to f32
  QuantScheme expert_scheme = QuantScheme::preset(16);
  std::size_t expert_bytes = 0;  // stored size of one expert
};

std::vector<std::uint8_t> encode_quantized_checkpoint(const Model& model,
                                                      const QuantScheme& scheme);
LoadedModel decode_quantized_checkpoint(std::span<const std::uint8_t> bytes);

// Accepts either format. Plain checkpoints report experts at fp16 size.
LoadedModel load_any_checkpoint(const std::string& path);

}  // namespace moe
