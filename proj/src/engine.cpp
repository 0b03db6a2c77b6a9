// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/engine.hpp"

#include <algorithm>

#include "moe/error.hpp"

namespace moe {

void SpeculationConfig::validate(const CacheConfig& cache, std::size_t n_experts) const {
  if (!active()) return;
  if (m > cache.b)
    throw Error(ErrorCode::kInvalidArgument,
                "speculation m=" + std::to_string(m) + " exceeds staging buffers b=" +
                    std::to_string(cache.b));
  if (m > n_experts) throw Error(ErrorCode::kInvalidArgument, "speculation m exceeds n_experts");
  if (lookahead != 1)
    throw Error(ErrorCode::kUnsupported, "live prefetch uses lookahead 1; other distances are "
                                         "available in recall studies only");
}

std::string_view to_string(Policy p) {
  switch (p) {
    case Policy::kFull: return "full";
    case Policy::kCacheOnly: return "cache_only";
    case Policy::kNoCache: return "no_cache";
    case Policy::kNaive: return "naive";
  }
  return "?";
}

Policy policy_from_string(std::string_view name) {
  for (Policy p : {Policy::kFull, Policy::kCacheOnly, Policy::kNoCache, Policy::kNaive})
    if (to_string(p) == name) return p;
  if (name == "lru") return Policy::kCacheOnly;
  throw Error(ErrorCode::kInvalidArgument, "unknown policy '" + std::string(name) + "'");
}

EngineConfig EngineConfig::resolved() const {
  EngineConfig r = *this;
  if (policy != Policy::kFull) r.spec.enabled = false;
  if (policy == Policy::kNoCache || policy == Policy::kNaive) r.cache.k = 0;
  return r;
}

std::vector<ExpertKey> guess_experts(const Model& model, std::span<const float> h,
                                     std::size_t target_layer, std::size_t m) {
  if (target_layer >= model.config().n_layers || m == 0) return {};
  const auto logits = model.gate_logits(target_layer, h);
  return route(logits, std::min(m, logits.size()), target_layer, 0).experts;
}

double guess_recall(std::span<const ExpertKey> guess, std::span<const std::uint32_t> needed) {
  if (needed.empty()) throw Error(ErrorCode::kInvalidArgument, "no needed experts");
  std::size_t found = 0;
  for (auto e : needed)
    found += std::any_of(guess.begin(), guess.end(),
                         [&](const ExpertKey& g) { return g.expert == e; });
  return static_cast<double>(found) / static_cast<double>(needed.size());
}

std::vector<ExpertBuffer> schedule_layer(ExpertStore& store, const EngineConfig& resolved,
                                         std::uint32_t layer,
                                         std::span<const std::uint32_t> needed,
                                         std::span<const std::uint32_t> token_of,
                                         std::span<const ExpertKey> guess,
                                         std::uint32_t step_pos) {
  std::vector<ExpertBuffer> buffers(needed.size());
  if (resolved.policy == Policy::kNaive) {
    for (std::uint32_t e = 0; e < store.n_experts(); ++e) {
      const auto it = std::find(needed.begin(), needed.end(), e);
      const std::size_t i = static_cast<std::size_t>(it - needed.begin());
      const std::uint32_t tag = it != needed.end() ? token_of[i] : step_pos;
      auto r = store.acquire({layer, e}, tag);
      if (it != needed.end()) buffers[i] = std::move(r.weights);
    }
  } else {
    // Experts already on device go first, so a promotion or load never evicts
    // an expert this step still needs. Staged and host experts keep their
    // order, which keeps LRU state identical with and without speculation.
    std::vector<std::size_t> order(needed.size());
    std::vector<bool> resident(needed.size());
    for (std::size_t i = 0; i < needed.size(); ++i) {
      order[i] = i;
      resident[i] = store.on_device({layer, needed[i]});
    }
    std::stable_partition(order.begin(), order.end(), [&](std::size_t i) { return resident[i]; });
    for (std::size_t i : order) buffers[i] = store.acquire({layer, needed[i]}, token_of[i]).weights;
  }
  if (resolved.spec.active() && !guess.empty()) store.speculative_load(guess, step_pos, layer);
  return buffers;
}

void first_use_order(std::span<const GateOutcome* const> outcomes,
                     std::vector<std::uint32_t>& needed, std::vector<std::uint32_t>& token_of) {
  needed.clear();
  token_of.clear();
  for (const GateOutcome* g : outcomes)
    for (const auto& key : g->experts)
      if (std::find(needed.begin(), needed.end(), key.expert) == needed.end()) {
        needed.push_back(key.expert);
        token_of.push_back(static_cast<std::uint32_t>(g->token_pos));
      }
}

Engine::Engine(const Model& model, EngineConfig config)
    : model_(model),
      config_(config.resolved()),
      store_(std::make_unique<ExpertStore>(model.config().n_layers, model.config().n_experts,
                                           config_.cache, HostArena::from_model(model))),
      cache_(model.config().n_layers) {
  config_.spec.validate(config_.cache, model.config().n_experts);
}

std::vector<ExpertKey> Engine::guess_for(std::size_t layer, std::span<const float> h) const {
  if (!config_.spec.active()) return {};
  return guess_experts(model_, h, layer + config_.spec.lookahead, config_.spec.m);
}

void Engine::record(const GateOutcome& g, std::span<const float> h) {
  TraceRecord r;
  r.token_pos = static_cast<std::uint32_t>(g.token_pos);
  r.layer = static_cast<std::uint32_t>(g.layer);
  for (const auto& k : g.experts) r.experts.push_back(k.expert);
  r.weights = g.weights;
  if (config_.record_hidden) r.hidden.assign(h.begin(), h.end());
  records_.push_back(std::move(r));
}

std::vector<ExpertView> Engine::views(const GateOutcome& g, std::span<const std::uint32_t> needed,
                                      const std::vector<ExpertBuffer>& buffers) const {
  const auto& cfg = model_.config();
  std::vector<ExpertView> out;
  for (const auto& key : g.experts) {
    const auto i = static_cast<std::size_t>(std::find(needed.begin(), needed.end(), key.expert) -
                                            needed.begin());
    if (i >= buffers.size() || !buffers[i])
      throw Error(ErrorCode::kUnknownKey, "store did not resolve " + to_string(key));
    out.push_back(ExpertView::from_block(buffers[i]->data(), cfg.d_model, cfg.d_ffn));
  }
  return out;
}

void Engine::mark(std::uint32_t pos, std::uint32_t layer, std::uint32_t n_tokens, bool prefill,
                  std::size_t begin) {
  steps_.push_back({pos, layer, n_tokens, prefill, begin, store_->event_count()});
}

std::vector<float> Engine::prefill(std::span<const std::uint32_t> tokens) {
  if (tokens.empty()) throw Error(ErrorCode::kInvalidArgument, "empty prompt");
  if (pos_ != 0) throw Error(ErrorCode::kInvalidArgument, "prefill must start the sequence");
  const auto& cfg = model_.config();
  if (tokens.size() > cfg.max_seq_len)
    throw Error(ErrorCode::kOutOfRange, "prompt longer than max_seq_len");
  std::vector<std::vector<float>> h;
  for (std::size_t p = 0; p < tokens.size(); ++p) h.push_back(model_.embed(tokens[p], p));

  std::vector<std::uint32_t> needed, token_of;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::size_t begin = store_->event_count();
    std::vector<GateOutcome> outcomes;
    for (std::size_t p = 0; p < tokens.size(); ++p) {
      model_.attention(l, cache_, p, h[p]);
      outcomes.push_back(model_.gate(l, h[p], p));
      record(outcomes.back(), h[p]);
    }
    std::vector<const GateOutcome*> ptrs;
    for (const auto& g : outcomes) ptrs.push_back(&g);
    first_use_order(ptrs, needed, token_of);
    const auto last = static_cast<std::uint32_t>(tokens.size() - 1);
    const auto guess = guess_for(l, h.back());
    const auto buffers = schedule_layer(*store_, config_, static_cast<std::uint32_t>(l), needed,
                                        token_of, guess, last);
    for (std::size_t p = 0; p < tokens.size(); ++p)
      model_.moe_forward(l, h[p], outcomes[p], views(outcomes[p], needed, buffers));
    mark(last, static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(tokens.size()), true,
         begin);
  }
  pos_ = tokens.size();
  prompt_len_ = tokens.size();
  logits_ = model_.logits(h.back());
  return logits_;
}

std::vector<float> Engine::step(std::uint32_t token) {
  const auto& cfg = model_.config();
  if (pos_ >= cfg.max_seq_len) throw Error(ErrorCode::kOutOfRange, "sequence is full");
  auto h = model_.embed(token, pos_);
  const auto pos = static_cast<std::uint32_t>(pos_);
  std::vector<std::uint32_t> needed;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::size_t begin = store_->event_count();
    model_.attention(l, cache_, pos_, h);
    const auto g = model_.gate(l, h, pos_);
    record(g, h);
    needed.clear();
    for (const auto& k : g.experts) needed.push_back(k.expert);
    const std::vector<std::uint32_t> token_of(needed.size(), pos);
    const auto guess = guess_for(l, h);
    const auto buffers =
        schedule_layer(*store_, config_, static_cast<std::uint32_t>(l), needed, token_of, guess, pos);
    model_.moe_forward(l, h, g, views(g, needed, buffers));
    mark(pos, static_cast<std::uint32_t>(l), 1, false, begin);
  }
  ++pos_;
  logits_ = model_.logits(h);
  return logits_;
}

std::vector<std::uint32_t> Engine::decode(std::size_t n, Sampler& sampler) {
  if (logits_.empty()) throw Error(ErrorCode::kInvalidArgument, "decode requires a prefill");
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(sampler.sample(logits_));
    step(out.back());
  }
  return out;
}

Trace Engine::trace() const {
  Trace t;
  t.header = header_for(model_.config(), config_.record_hidden, prompt_len_);
  t.records = records_;
  // Prefill records are produced layer-major; the trace is token-major.
  std::stable_sort(t.records.begin(), t.records.end(), [](const auto& a, const auto& b) {
    return a.token_pos != b.token_pos ? a.token_pos < b.token_pos : a.layer < b.layer;
  });
  return t;
}

}  // namespace moe
