// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>

#include "markov_oracle.hpp"
#include "moe/error.hpp"
#include "moe/replay.hpp"
#include "moe/trace.hpp"
#include "store_oracle.hpp"
#include "test_util.hpp"

using namespace moe;

namespace {

EngineConfig config_for(Policy policy, std::size_t k = 2, std::size_t m = 2) {
  EngineConfig c;
  c.policy = policy;
  c.cache = {k, 4, 64};
  c.spec.m = m;
  return c;
}

Engine run(const Model& model, const EngineConfig& cfg, std::uint64_t seed, std::size_t prompt,
           std::size_t n) {
  Engine engine(model, cfg);
  Rng rng(seed);
  std::vector<std::uint32_t> tokens(prompt);
  for (auto& t : tokens) t = static_cast<std::uint32_t>(rng.below(model.config().vocab_size));
  engine.prefill(tokens);
  auto sampler = Sampler::categorical(seed);
  engine.decode(n, sampler);
  return engine;
}

// Per-step hit fraction of a replay, used for batch-mean statistics.
std::vector<double> step_recalls(const ReplayResult& r) {
  std::vector<double> out;
  for (const auto& s : r.steps) {
    double hits = 0, total = 0;
    for (std::size_t i = s.event_begin; i < s.event_end; ++i) {
      const auto kind = r.events[i].kind;
      if (!is_acquire_outcome(kind)) continue;
      ++total;
      hits += kind != EventKind::kMissLoad;
    }
    out.push_back(hits / total);
  }
  return out;
}

}  // namespace

TEST_SUITE("trace") {

TEST_CASE("10 tokens over 6 layers give 60 records") {
  auto cfg = test::tiny_config();
  cfg.n_layers = 6;
  const auto model = Model::initialize(cfg);
  const auto engine = run(model, config_for(Policy::kFull), 1, 1, 9);
  const auto trace = engine.trace();
  CHECK(trace.records.size() == 60);
  CHECK(trace.n_tokens() == 10);
  CHECK(trace.header.config_digest == cfg.digest());
}

TEST_CASE("JSONL and binary round trips are lossless") {
  const auto model = Model::initialize(test::tiny_config());
  const auto trace = run(model, config_for(Policy::kFull), 2, 4, 12).trace();
  CHECK(trace_from_jsonl(to_jsonl(trace)) == trace);
  CHECK(trace_from_binary(to_binary(trace)) == trace);

  auto bare = trace;
  bare.header.records_hidden = false;
  for (auto& r : bare.records) r.hidden.clear();
  CHECK(trace_from_jsonl(to_jsonl(bare)) == bare);
  const auto with = to_binary(trace).size(), without = to_binary(bare).size();
  // The header spells "true" instead of "false": one byte shorter.
  CHECK(with + 1 - without == trace.records.size() * 16 * 4);

  const auto dir = std::filesystem::temp_directory_path();
  save_trace(trace, (dir / "moe_trace_test.jsonl").string(), false);
  save_trace(trace, (dir / "moe_trace_test.bin").string(), true);
  CHECK(load_trace((dir / "moe_trace_test.jsonl").string()) == trace);
  CHECK(load_trace((dir / "moe_trace_test.bin").string()) == trace);
}

TEST_CASE("JSONL layout") {
  Trace t;
  t.header = {"abc", 1, 4, 1, 2, true, 0};
  t.records.push_back({0, 0, {3}, {1.0f}, {0.5f, -2.0f}});
  CHECK(to_jsonl(t) ==
        "{\"config_digest\":\"abc\",\"d_model\":2,\"n_experts\":4,\"n_layers\":1,"
        "\"prompt_len\":0,\"records_hidden\":true,\"top_k\":1}\n"
        "{\"t\":0,\"l\":0,\"e\":[3],\"w\":[1.0],\"h\":[0.5,-2.0]}\n");
}

TEST_CASE("malformed traces are rejected") {
  const auto good = synth({5, 2, 8, 2, 0.3, 1});
  auto bad = good;
  std::swap(bad.records[0], bad.records[1]);
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = good;
  bad.records.pop_back();
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = good;
  bad.records[3].experts[1] = bad.records[3].experts[0];
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = good;
  bad.records[3].experts[1] = 8;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(trace_from_jsonl("{\"n_layers\":2}\n"), Error);
  CHECK_THROWS_AS(trace_from_jsonl(""), Error);
  auto bin = to_binary(good);
  bin.pop_back();
  CHECK_THROWS_AS(trace_from_binary(bin), Error);
}

TEST_CASE("replay reproduces live event logs for every policy") {
  const auto model = Model::initialize(test::tiny_config());
  for (Policy p : {Policy::kFull, Policy::kCacheOnly, Policy::kNoCache, Policy::kNaive}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto cfg = config_for(p, seed % 3, 1 + seed % 2);
      const auto engine = run(model, cfg, seed, 1 + seed * 3, 15);
      const auto trace = engine.trace();
      const auto replayed = replay(trace_from_jsonl(to_jsonl(trace)), cfg, &model);
      CHECK(replayed.events == engine.store().events());
      CHECK(replayed.steps == engine.steps());
      CHECK(replayed.recall == recall(engine.store().events()));
    }
  }
}

TEST_CASE("speculative replay requires hidden states and the model") {
  const auto model = Model::initialize(test::tiny_config());
  auto cfg = config_for(Policy::kFull);
  cfg.record_hidden = false;
  const auto trace = run(model, cfg, 3, 2, 5).trace();
  CHECK_THROWS_AS(replay(trace, config_for(Policy::kFull), &model), Error);
  CHECK_NOTHROW(replay(trace, config_for(Policy::kCacheOnly)));
  const auto full = run(model, config_for(Policy::kFull), 3, 2, 5).trace();
  CHECK_THROWS_AS(replay(full, config_for(Policy::kFull)), Error);
  auto other = test::tiny_config();
  other.seed = 77;
  const auto stranger = Model::initialize(other);
  CHECK_THROWS_AS(replay(full, config_for(Policy::kFull), &stranger), Error);
}

TEST_CASE("replaying the 3,7,3,1,7 access sequence") {
  Trace t;
  t.header = {"hand", 1, 8, 1, 0, false, 0};
  std::uint32_t pos = 0;
  for (std::uint32_t e : {3u, 7u, 3u, 1u, 7u}) t.records.push_back({pos++, 0, {e}, {1.0f}, {}});
  const auto r = replay(t, config_for(Policy::kCacheOnly, 2));
  test::RecencyListLru ref(1, 2, 64);
  for (const auto& rec : t.records) ref.access({{0, rec.experts[0]}, rec.token_pos});
  CHECK(r.events == ref.events());
  CHECK(r.events.size() == 7);
  CHECK(r.recall == doctest::Approx(0.2));
}

TEST_CASE("k=E replay hits after the first pass") {
  const auto t = synth({300, 3, 8, 2, 0.0, 4});
  const auto r = replay(t, config_for(Policy::kCacheOnly, 8));
  std::vector<std::vector<bool>> seen(3, std::vector<bool>(8, false));
  for (const auto& e : r.events) {
    if (e.kind == EventKind::kMissLoad) {
      CHECK_FALSE(seen[e.key.layer][e.key.expert]);
      seen[e.key.layer][e.key.expert] = true;
    }
  }
  CHECK(r.recall > 0.98);
}

TEST_CASE("synthetic traces") {
  SyntheticTraceSpec spec{2000, 3, 8, 2, 0.0, 9};
  CHECK(synth(spec) == synth(spec));
  spec.seed = 10;
  CHECK_FALSE(synth(spec) == synth({2000, 3, 8, 2, 0.0, 9}));

  // Uniform marginals at locality 0.
  const auto t = synth(spec);
  t.validate();
  std::vector<double> freq(8, 0.0);
  for (const auto& r : t.records)
    for (auto e : r.experts) freq[e] += 1.0;
  for (double f : freq) CHECK(f / (2000.0 * 3 * 2) == doctest::Approx(0.125).epsilon(0.1));
  for (const auto& r : t.records) CHECK(r.weights[0] >= r.weights[1]);

  // Constant working set at locality 1.
  const auto constant = synth({200, 2, 8, 2, 1.0, 3});
  const auto r = replay(constant, config_for(Policy::kCacheOnly, 2));
  for (const auto& s : r.steps)
    if (s.token_pos > 0)
      for (std::size_t i = s.event_begin; i < s.event_end; ++i)
        CHECK(r.events[i].kind == EventKind::kHit);

  CHECK_THROWS_AS(synth({10, 2, 8, 9, 0.0, 0}), Error);
  CHECK_THROWS_AS(synth({10, 2, 8, 2, 1.5, 0}), Error);
}

TEST_CASE("Markov oracle agrees with the symmetric closed form") {
  // Hits-first acquisition keeps each cached expert's hit chance at k/E.
  for (std::size_t k : {1u, 2u, 3u, 4u})
    CHECK(test::stationary_lru_recall(8, k) == doctest::Approx(static_cast<double>(k) / 8).epsilon(1e-9));
  CHECK(test::stationary_lru_recall(8, 0) == 0.0);
}

TEST_CASE("locality-0 recall matches the Markov oracle within 3 sigma") {
  const std::size_t n = 100000;
  const auto t = synth({n, 1, 8, 2, 0.0, 2024});
  for (std::size_t k : {1u, 2u, 4u}) {
    const auto r = replay(t, config_for(Policy::kCacheOnly, k));
    const auto stats = test::batch_mean(step_recalls(r), 100);
    const double expected = test::stationary_lru_recall(8, k);
    INFO("k=" << k << " measured " << stats.mean << " expected " << expected << " sigma "
              << stats.sigma);
    CHECK(std::abs(stats.mean - expected) <= 3 * stats.sigma);
  }
}

TEST_CASE("replay is deterministic") {
  const auto t = synth({500, 4, 8, 2, 0.5, 5});
  CHECK(replay(t, config_for(Policy::kCacheOnly, 3)).events ==
        replay(t, config_for(Policy::kCacheOnly, 3)).events);
}

}  // TEST_SUITE
