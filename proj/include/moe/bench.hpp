// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0
//
// Cost model over store event logs: one host-to-device channel, compute
// windows per layer step, and the ablation and recall reports built on it.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "moe/engine.hpp"
#include "moe/expert_store.hpp"
#include "moe/quant.hpp"
#include "moe/trace.hpp"

namespace moe {

struct CostModel {
  double h2d_bandwidth = 12e9;  // bytes/s
  double expert_bytes = 0.0;
  double expert_compute_time = 0.0;  // s per expert application
  double attn_compute_time = 0.0;    // s per layer per token
  bool overlap = true;
  bool pinned = false;
  double pinned_bandwidth_multiplier = 1.0;

  double effective_bandwidth() const;
  double transfer_time() const;  // one expert
  void validate() const;

  // Mixtral-8x7B experts under `scheme` over a 12 GB/s link.
  static CostModel mixtral_calibration(const QuantScheme& scheme);
};

struct LatencyReport {
  std::vector<double> token_latency;  // decode tokens, in order
  double prefill_time = 0.0;
  double tokens_per_sec = 0.0;
  // Totals over every step; compute excludes time spent overlapped with a
  // transfer, so compute + overlapped + stalled == total().
  double compute = 0.0;
  double overlapped = 0.0;
  double stalled = 0.0;
  double residual_transfer = 0.0;  // still in flight when the log ends
  std::uint64_t h2d_bytes = 0;     // miss and speculative loads
  CostModel cost;

  double total() const { return compute + overlapped + stalled; }
  double stall_frac() const;
};

// Replays `events` against the channel. Queued speculative transfers run
// only under compute, newest batch first. Misses preempt them and stall
// until loaded; a staging hit waits for the rest of its own transfer;
// without overlap each speculative transfer stalls when issued.
LatencyReport simulate_latency(std::span<const StoreEvent> events, std::span<const StepMark> steps,
                               const CostModel& cost, std::size_t top_k);

struct AblationRow {
  std::string policy;
  std::size_t k = 0;
  std::size_t m = 0;
  double recall = 0.0;
  double tokens_per_sec = 0.0;
  double stall_frac = 0.0;
};

// The four policies at `base`, then a cache_only k sweep and a full m sweep.
// Full-policy rows are left out unless `model` is given and the trace carries
// hidden states.
std::vector<AblationRow> ablation_suite(const Trace& trace, const Model* model,
                                        const CostModel& cost, const EngineConfig& base,
                                        std::span<const std::size_t> k_values,
                                        std::span<const std::size_t> m_values);

struct RecallPoint {
  std::string kind;  // "lru" or "speculative"
  std::size_t k_or_m = 0;
  std::size_t lookahead = 0;
  double recall = 0.0;
};

// LRU recall per k pooled over traces, and mean guess recall per (lookahead,
// m) over every (token, layer) whose target layer exists. Speculative points
// are produced only when `model` is given and the traces carry hidden states.
std::vector<RecallPoint> recall_curves(std::span<const Trace> traces, const Model* model,
                                       std::span<const std::size_t> k_values,
                                       std::span<const std::size_t> lookaheads,
                                       std::span<const std::size_t> m_values);

void write_csv(std::ostream& os, std::span<const AblationRow> rows);
void write_csv(std::ostream& os, std::span<const RecallPoint> points);

}  // namespace moe
