// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>

#include "moe/engine.hpp"
#include "moe/error.hpp"
#include "test_util.hpp"

using namespace moe;

namespace {

EngineConfig config_for(Policy policy, std::size_t k = 2, std::size_t m = 2) {
  EngineConfig c;
  c.policy = policy;
  c.cache.k = k;
  c.cache.b = 4;
  c.cache.expert_bytes = 1;
  c.spec.m = m;
  return c;
}

std::vector<std::uint32_t> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint32_t> out(n);
  for (auto& t : out) t = static_cast<std::uint32_t>(rng.below(vocab));
  return out;
}

std::size_t count(const std::vector<StoreEvent>& events, EventKind kind, std::size_t begin = 0,
                  std::size_t end = SIZE_MAX) {
  std::size_t n = 0;
  for (std::size_t i = begin; i < std::min(end, events.size()); ++i) n += events[i].kind == kind;
  return n;
}

// Experts and attention outputs are zero, so every layer's gate sees the
// embedding and the next layer's guess is exact.
Model pass_through_model(const ModelConfig& cfg) {
  ModelParams p = test::with_zero_experts(Model::initialize(cfg)).params();
  for (auto& L : p.layers) std::fill(L.wo.data.begin(), L.wo.data.end(), 0.0f);
  return Model(cfg, std::move(p));
}

}  // namespace

TEST_SUITE("engine") {

TEST_CASE("offloaded logits equal the dense forward pass for every policy") {
  const auto cfg = test::tiny_config();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto c = cfg;
    c.seed = seed;
    const auto model = Model::initialize(c);
    const auto tokens = random_tokens(12, cfg.vocab_size, seed);
    const auto dense = dense_forward(model, tokens);
    for (Policy p : {Policy::kFull, Policy::kCacheOnly, Policy::kNoCache, Policy::kNaive}) {
      for (std::size_t k : {0u, 1u, 2u, 8u}) {
        Engine engine(model, config_for(p, k));
        const std::span<const std::uint32_t> all(tokens);
        CHECK(engine.prefill(all.first(5)) == dense[4]);
        for (std::size_t i = 5; i < tokens.size(); ++i) REQUIRE(engine.step(tokens[i]) == dense[i]);
        engine.store().audit();
      }
    }
  }
}

TEST_CASE("speculation on and off generate identical tokens and logits") {
  const auto model = Model::initialize(test::tiny_config());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto prompt = random_tokens(3, 32, 40 + seed);
    auto on_cfg = config_for(Policy::kFull);
    auto off_cfg = on_cfg;
    off_cfg.spec.enabled = false;
    Engine on(model, on_cfg), off(model, off_cfg);
    on.prefill(prompt);
    off.prefill(prompt);
    auto s1 = Sampler::categorical(seed), s2 = Sampler::categorical(seed);
    CHECK(on.decode(20, s1) == off.decode(20, s2));
    CHECK(on.last_logits() == off.last_logits());
    CHECK(count(on.store().events(), EventKind::kSpeculativeLoad) > 0);
    CHECK(count(off.store().events(), EventKind::kSpeculativeLoad) == 0);
  }
}

TEST_CASE("speculative loads follow the layer's acquires and precede the next layer's") {
  const auto model = Model::initialize(test::tiny_config());
  Engine engine(model, config_for(Policy::kFull, 1, 2));
  engine.prefill(random_tokens(4, 32, 7));
  auto sampler = Sampler::greedy();
  engine.decode(15, sampler);
  const auto events = engine.store().events();
  std::size_t spec_seen = 0;
  for (const auto& step : engine.steps()) {
    bool speculated = false;
    for (std::size_t i = step.event_begin; i < step.event_end; ++i) {
      const auto& e = events[i];
      if (e.kind == EventKind::kSpeculativeLoad) {
        speculated = true;
        ++spec_seen;
        CHECK(e.key.layer == step.layer + 1);
        CHECK(e.layer == step.layer);
      } else {
        // acquires of this step and their evictions never follow a speculative load
        CHECK_FALSE(speculated);
        CHECK(e.key.layer == step.layer);
      }
    }
    if (step.layer + 1 == model.config().n_layers)
      CHECK(count(events, EventKind::kSpeculativeLoad, step.event_begin, step.event_end) == 0);
  }
  CHECK(spec_seen > 0);
  CHECK(engine.steps().back().event_end == events.size());
}

TEST_CASE("guess with zero lookahead reproduces the layer's own gate") {
  const auto model = Model::initialize(test::tiny_config());
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    std::vector<float> h(16);
    for (auto& v : h) v = static_cast<float>(rng.normal());
    const auto g = model.gate(1, h, 0);
    CHECK(guess_experts(model, h, 1, 2) == g.experts);
  }
  std::vector<float> h(16, 0.5f);
  CHECK(guess_experts(model, h, 4, 2).empty());
}

TEST_CASE("perfect guesses remove every miss after the first layer") {
  const auto model = pass_through_model(test::tiny_config());
  Engine engine(model, config_for(Policy::kFull, 2, 2));
  engine.prefill(random_tokens(1, 32, 3));
  auto sampler = Sampler::categorical(5);
  engine.decode(30, sampler);
  const auto events = engine.store().events();
  std::size_t staged_hits = 0;
  for (const auto& step : engine.steps()) {
    if (step.layer == 0) continue;
    CHECK(count(events, EventKind::kMissLoad, step.event_begin, step.event_end) == 0);
    staged_hits += count(events, EventKind::kStagingHit, step.event_begin, step.event_end);
  }
  CHECK(staged_hits > 0);
  // Every guess at lookahead 1 is exact.
  const auto trace = engine.trace();
  for (std::size_t t = 0; t < trace.n_tokens(); ++t)
    for (std::size_t l = 0; l + 1 < 4; ++l)
      CHECK(guess_recall(guess_experts(model, trace.at(t, l).hidden, l + 1, 2),
                         trace.at(t, l + 1).experts) == 1.0);
}

TEST_CASE("untrained model guesses are informative but imperfect") {
  const auto model = Model::initialize(test::tiny_config());
  Engine engine(model, config_for(Policy::kCacheOnly));
  engine.prefill(random_tokens(2, 32, 8));
  auto sampler = Sampler::categorical(1);
  engine.decode(60, sampler);
  const auto trace = engine.trace();
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < trace.n_tokens(); ++t)
    for (std::size_t l = 0; l + 1 < 4; ++l, ++n)
      total += guess_recall(guess_experts(model, trace.at(t, l).hidden, l + 1, 2),
                            trace.at(t, l + 1).experts);
  const double mean = total / static_cast<double>(n);
  CHECK(mean > 0.0);
  CHECK(mean < 1.0);
}

TEST_CASE("prefill acquires each distinct expert once per layer") {
  auto cfg = test::tiny_config();
  const auto model = Model::initialize(cfg);
  Engine engine(model, config_for(Policy::kCacheOnly, 2));
  engine.prefill(random_tokens(16, 32, 11));
  const auto events = engine.store().events();
  const auto trace = engine.trace();
  for (const auto& step : engine.steps()) {
    CHECK(step.prefill);
    std::vector<std::uint32_t> distinct;
    for (std::size_t t = 0; t < 16; ++t)
      for (auto e : trace.at(t, step.layer).experts)
        if (std::find(distinct.begin(), distinct.end(), e) == distinct.end()) distinct.push_back(e);
    const std::size_t acquires = count(events, EventKind::kHit, step.event_begin, step.event_end) +
                                 count(events, EventKind::kMissLoad, step.event_begin, step.event_end);
    CHECK(acquires == distinct.size());
    CHECK(count(events, EventKind::kMissLoad, step.event_begin, step.event_end) <= 8);
  }
  Engine empty(model, config_for(Policy::kFull));
  CHECK_THROWS_AS(empty.prefill({}), Error);
  std::vector<std::uint32_t> bad{40};
  CHECK_THROWS_AS(empty.prefill(bad), Error);
}

TEST_CASE("one-token prefill matches one decode step") {
  const auto model = Model::initialize(test::tiny_config());
  for (Policy p : {Policy::kFull, Policy::kCacheOnly, Policy::kNaive}) {
    Engine a(model, config_for(p)), b(model, config_for(p));
    const std::vector<std::uint32_t> tok{9};
    CHECK(a.prefill(tok) == b.step(9));
    CHECK(a.store().events() == b.store().events());
  }
}

TEST_CASE("prefill records match teacher-forced decoding") {
  const auto model = Model::initialize(test::tiny_config());
  const auto tokens = random_tokens(9, 32, 12);
  Engine batch(model, config_for(Policy::kFull)), serial(model, config_for(Policy::kFull));
  batch.prefill(tokens);
  for (auto t : tokens) serial.step(t);
  CHECK(batch.trace().records == serial.trace().records);
  CHECK(batch.last_logits() == serial.last_logits());
}

TEST_CASE("decode records one outcome per token and layer") {
  const auto model = Model::initialize(test::tiny_config());
  Engine engine(model, config_for(Policy::kFull));
  engine.prefill(random_tokens(3, 32, 1));
  auto sampler = Sampler::greedy();
  const auto out = engine.decode(10, sampler);
  CHECK(out.size() == 10);
  const auto trace = engine.trace();
  CHECK(trace.header.prompt_len == 3);
  CHECK(trace.records.size() == 13 * 4);
  CHECK(std::count_if(trace.records.begin(), trace.records.end(),
                      [](const TraceRecord& r) { return r.token_pos >= 3; }) == 40);
  CHECK(trace.records.front().hidden.size() == 16);
  trace.validate();

  Engine again(model, config_for(Policy::kCacheOnly));
  again.prefill(random_tokens(3, 32, 1));
  auto greedy = Sampler::greedy();
  CHECK(again.decode(10, greedy) == out);
}

TEST_CASE("naive policy loads every expert of every layer") {
  const auto model = Model::initialize(test::tiny_config());
  Engine engine(model, config_for(Policy::kNaive, 4));
  CHECK(engine.config().cache.k == 0);
  CHECK_FALSE(engine.config().spec.active());
  engine.prefill(random_tokens(2, 32, 5));
  engine.step(3);
  const auto events = engine.store().events();
  for (const auto& step : engine.steps())
    CHECK(count(events, EventKind::kMissLoad, step.event_begin, step.event_end) == 8);
  CHECK(events.size() == 8 * 4 * 2);
}

TEST_CASE("policy resolution and validation") {
  auto c = config_for(Policy::kNoCache, 4).resolved();
  CHECK(c.cache.k == 0);
  CHECK_FALSE(c.spec.active());
  c = config_for(Policy::kCacheOnly, 4).resolved();
  CHECK(c.cache.k == 4);
  CHECK_FALSE(c.spec.active());
  CHECK(policy_from_string("cache_only") == Policy::kCacheOnly);
  CHECK(policy_from_string("lru") == Policy::kCacheOnly);
  CHECK_THROWS_AS(policy_from_string("fastest"), Error);

  const auto model = Model::initialize(test::tiny_config());
  auto bad = config_for(Policy::kFull, 2, 5);
  CHECK_THROWS_AS(Engine(model, bad), Error);
  bad = config_for(Policy::kFull);
  bad.spec.lookahead = 2;
  CHECK_THROWS_AS(Engine(model, bad), Error);
  auto m0 = config_for(Policy::kFull, 2, 0);
  CHECK_FALSE(m0.resolved().spec.active());
}

TEST_CASE("guess recall counts overlap with the needed experts") {
  const std::vector<ExpertKey> guess{{1, 3}, {1, 5}};
  const std::vector<std::uint32_t> both{5, 3}, one{3, 2}, none{0, 1};
  CHECK(guess_recall(guess, both) == 1.0);
  CHECK(guess_recall(guess, one) == 0.5);
  CHECK(guess_recall(guess, none) == 0.0);
}

}  // TEST_SUITE
