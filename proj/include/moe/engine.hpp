// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0
//
// Offloaded inference loop. Per layer: attention, gate on the pre-MoE state,
// acquire the selected experts (resident ones first, then heaviest first),
// speculatively stage the next layer's likely experts, then run the MoE block.

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "moe/expert_store.hpp"
#include "moe/model.hpp"
#include "moe/trace.hpp"

namespace moe {

struct SpeculationConfig {
  bool enabled = true;
  std::size_t m = 2;          // experts staged per layer
  std::size_t lookahead = 1;  // live prefetch supports 1 only

  bool active() const { return enabled && m > 0; }
  void validate(const CacheConfig& cache, std::size_t n_experts) const;
};

// The four configurations compared in the ablation.
enum class Policy { kFull, kCacheOnly, kNoCache, kNaive };

std::string_view to_string(Policy p);
Policy policy_from_string(std::string_view name);

struct EngineConfig {
  Policy policy = Policy::kFull;
  CacheConfig cache;
  SpeculationConfig spec;
  bool record_hidden = true;

  // Cache and speculation settings after the policy is applied.
  EngineConfig resolved() const;
};

// Top-m experts of `target_layer`'s gate applied to h. Empty past the last layer.
std::vector<ExpertKey> guess_experts(const Model& model, std::span<const float> h,
                                     std::size_t target_layer, std::size_t m);

// |guess ∩ needed| / |needed|.
double guess_recall(std::span<const ExpertKey> guess, std::span<const std::uint32_t> needed);

// One layer of work: a decode step covers one token, a prefill step covers
// the whole prompt. Events [event_begin, event_end) of the store log belong
// to it.
struct StepMark {
  std::uint32_t token_pos = 0;  // last token covered
  std::uint32_t layer = 0;
  std::uint32_t n_tokens = 1;
  bool prefill = false;
  std::size_t event_begin = 0;
  std::size_t event_end = 0;

  friend bool operator==(const StepMark&, const StepMark&) = default;
};

// Acquires the experts of one layer step under a resolved config, then issues
// the speculative load for `guess`. `needed` lists distinct experts by
// priority, tagged by `token_of`; device-resident experts are acquired first,
// then the rest, each group in `needed` order; the naive policy additionally
// loads every other expert of the layer, tagged `step_pos`. Returns one
// buffer per entry of `needed`.
std::vector<ExpertBuffer> schedule_layer(ExpertStore& store, const EngineConfig& resolved,
                                         std::uint32_t layer,
                                         std::span<const std::uint32_t> needed,
                                         std::span<const std::uint32_t> token_of,
                                         std::span<const ExpertKey> guess,
                                         std::uint32_t step_pos);

// Distinct experts of a group of outcomes in first-use order, with the
// position of each expert's first user.
void first_use_order(std::span<const GateOutcome* const> outcomes,
                     std::vector<std::uint32_t>& needed, std::vector<std::uint32_t>& token_of);

class Engine {
 public:
  Engine(const Model& model, EngineConfig config);

  // Processes the prompt layer by layer; returns logits for the last token.
  std::vector<float> prefill(std::span<const std::uint32_t> tokens);
  // Feeds one token; returns the next-token logits.
  std::vector<float> step(std::uint32_t token);
  // Samples and feeds n tokens, starting from the current logits.
  std::vector<std::uint32_t> decode(std::size_t n, Sampler& sampler);

  const std::vector<float>& last_logits() const { return logits_; }
  std::size_t position() const { return pos_; }
  const ExpertStore& store() const { return *store_; }
  const EngineConfig& config() const { return config_; }
  const std::vector<StepMark>& steps() const { return steps_; }
  Trace trace() const;

 private:
  std::vector<ExpertKey> guess_for(std::size_t layer, std::span<const float> h) const;
  void record(const GateOutcome& g, std::span<const float> h);
  std::vector<ExpertView> views(const GateOutcome& g, std::span<const std::uint32_t> needed,
                                const std::vector<ExpertBuffer>& buffers) const;
  void mark(std::uint32_t pos, std::uint32_t layer, std::uint32_t n_tokens, bool prefill,
            std::size_t begin);

  const Model& model_;
  EngineConfig config_;  // resolved
  std::unique_ptr<ExpertStore> store_;
  KvCache cache_;
  std::size_t pos_ = 0;
  std::size_t prompt_len_ = 0;
  std::vector<float> logits_;
  std::vector<TraceRecord> records_;
  std::vector<StepMark> steps_;
};

}  // namespace moe
