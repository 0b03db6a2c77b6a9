// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/replay.hpp"

#include "moe/error.hpp"

namespace moe {

namespace {

GateOutcome outcome_of(const TraceRecord& r) {
  GateOutcome g;
  g.layer = r.layer;
  g.token_pos = r.token_pos;
  for (auto e : r.experts) g.experts.push_back({r.layer, e});
  g.weights = r.weights;
  return g;
}

}  // namespace

ReplayResult replay(const Trace& trace, const EngineConfig& config, const Model* model) {
  trace.validate();
  const auto& h = trace.header;
  const EngineConfig cfg = config.resolved();
  cfg.spec.validate(cfg.cache, h.n_experts);
  if (cfg.spec.active()) {
    if (!h.records_hidden)
      throw Error(ErrorCode::kInvalidArgument,
                  "speculative replay needs a trace recorded with hidden states");
    if (model == nullptr)
      throw Error(ErrorCode::kInvalidArgument, "speculative replay needs the model's gates");
    if (model->config().digest() != h.config_digest)
      throw Error(ErrorCode::kInvalidArgument, "trace was recorded with a different model config");
  }

  ExpertStore store(h.n_layers, h.n_experts, cfg.cache);
  ReplayResult out;
  auto guess = [&](std::uint32_t layer, const TraceRecord& r) -> std::vector<ExpertKey> {
    if (!cfg.spec.active()) return {};
    return guess_experts(*model, r.hidden, layer + cfg.spec.lookahead, cfg.spec.m);
  };
  auto mark = [&](std::uint32_t pos, std::uint32_t layer, std::uint32_t n, bool prefill,
                  std::size_t begin) {
    out.steps.push_back({pos, layer, n, prefill, begin, store.event_count()});
  };

  const std::size_t n_tokens = trace.n_tokens();
  std::vector<std::uint32_t> needed, token_of;
  if (h.prompt_len > 0) {
    const auto last = static_cast<std::uint32_t>(h.prompt_len - 1);
    for (std::uint32_t l = 0; l < h.n_layers; ++l) {
      const std::size_t begin = store.event_count();
      std::vector<GateOutcome> outcomes;
      for (std::size_t t = 0; t < h.prompt_len; ++t) outcomes.push_back(outcome_of(trace.at(t, l)));
      std::vector<const GateOutcome*> ptrs;
      for (const auto& g : outcomes) ptrs.push_back(&g);
      first_use_order(ptrs, needed, token_of);
      schedule_layer(store, cfg, l, needed, token_of, guess(l, trace.at(last, l)), last);
      mark(last, l, static_cast<std::uint32_t>(h.prompt_len), true, begin);
    }
  }
  for (std::size_t t = h.prompt_len; t < n_tokens; ++t) {
    for (std::uint32_t l = 0; l < h.n_layers; ++l) {
      const std::size_t begin = store.event_count();
      const auto& r = trace.at(t, l);
      const std::vector<std::uint32_t> tags(r.experts.size(), r.token_pos);
      schedule_layer(store, cfg, l, r.experts, tags, guess(l, r), r.token_pos);
      mark(r.token_pos, l, 1, false, begin);
    }
  }
  out.events = store.events();
  out.recall = recall(out.events);
  return out;
}

}  // namespace moe
