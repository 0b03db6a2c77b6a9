// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-token, per-layer gate records with optional pre-MoE hidden states.
//
// JSONL file: a canonical JSON header line, then one line per (token, layer):
//   {"t":int,"l":int,"e":[ints],"w":[floats],"h":[floats]?}
// Binary file, little-endian:
//   "MOET1" | u32 header_len | header JSON | u64 n_records | records
//   record: u32 t | u32 l | u32 n | u32 e[n] | f32 w[n] | f32 h[d_model]?

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moe/expert_store.hpp"
#include "moe/model.hpp"

namespace moe {

struct TraceHeader {
  std::string config_digest;
  std::size_t n_layers = 0;
  std::size_t n_experts = 0;
  std::size_t top_k = 0;
  std::size_t d_model = 0;
  bool records_hidden = false;
  std::size_t prompt_len = 0;  // leading tokens processed as one prefill batch

  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

struct TraceRecord {
  std::uint32_t token_pos = 0;
  std::uint32_t layer = 0;
  std::vector<std::uint32_t> experts;  // descending gate weight
  std::vector<float> weights;
  std::vector<float> hidden;  // pre-MoE state, empty unless recorded

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct Trace {
  TraceHeader header;
  std::vector<TraceRecord> records;

  std::size_t n_tokens() const;
  // Record for (token, layer); records are dense and sorted.
  const TraceRecord& at(std::size_t token, std::size_t layer) const;
  void validate() const;

  friend bool operator==(const Trace&, const Trace&) = default;
};

TraceHeader header_for(const ModelConfig& cfg, bool records_hidden, std::size_t prompt_len);

std::string header_to_json(const TraceHeader& h);
std::string to_jsonl(const Trace& trace);
Trace trace_from_jsonl(const std::string& text);
std::vector<std::uint8_t> to_binary(const Trace& trace);
Trace trace_from_binary(std::span<const std::uint8_t> bytes);

// Chooses the format by magic bytes.
void save_trace(const Trace& trace, const std::string& path, bool binary);
Trace load_trace(const std::string& path);

struct SyntheticTraceSpec {
  std::size_t n_tokens = 1000;
  std::size_t n_layers = 4;
  std::size_t n_experts = 8;
  std::size_t top_k = 2;
  double locality = 0.0;  // chance a layer reuses the previous token's expert set
  std::uint64_t seed = 0;

  void validate() const;
};

Trace synth(const SyntheticTraceSpec& spec);

}  // namespace moe
