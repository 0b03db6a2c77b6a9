// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <sstream>

#include "moe/bench.hpp"
#include "moe/error.hpp"
#include "moe/replay.hpp"
#include "test_util.hpp"

using namespace moe;

namespace {

EngineConfig config_for(Policy policy, std::size_t k = 2, std::size_t m = 2) {
  EngineConfig c;
  c.policy = policy;
  c.cache = {k, 4, 1000};
  c.spec.m = m;
  return c;
}

CostModel simple_cost(double attn, double expert, double transfer) {
  CostModel c;
  c.h2d_bandwidth = 1000.0;
  c.expert_bytes = transfer * 1000.0;
  c.attn_compute_time = attn;
  c.expert_compute_time = expert;
  return c;
}

Trace recorded_trace(const Model& model, std::uint64_t seed, std::size_t prompt, std::size_t n) {
  Engine engine(model, config_for(Policy::kCacheOnly));
  Rng rng(seed);
  std::vector<std::uint32_t> tokens(prompt);
  for (auto& t : tokens) t = static_cast<std::uint32_t>(rng.below(model.config().vocab_size));
  engine.prefill(tokens);
  auto sampler = Sampler::categorical(seed);
  engine.decode(n, sampler);
  return engine.trace();
}

LatencyReport simulate(const Trace& trace, const Model* model, const EngineConfig& cfg,
                       const CostModel& cost) {
  const auto r = replay(trace, cfg, model);
  return simulate_latency(r.events, r.steps, cost, trace.header.top_k);
}

std::size_t count(const ReplayResult& r, EventKind kind) {
  std::size_t n = 0;
  for (const auto& e : r.events) n += e.kind == kind;
  return n;
}

}  // namespace

TEST_SUITE("bench") {

TEST_CASE("transfer time and validation") {
  CostModel c = simple_cost(1, 1, 0.5);
  CHECK(c.transfer_time() == doctest::Approx(0.5));
  c.pinned = true;
  c.pinned_bandwidth_multiplier = 2.0;
  CHECK(c.transfer_time() == doctest::Approx(0.25));
  c.h2d_bandwidth = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK_THROWS_AS(simulate_latency({}, {}, c, 2), Error);
  c = simple_cost(1, 1, 0.5);
  c.pinned_bandwidth_multiplier = 0.5;
  CHECK_THROWS_AS(c.validate(), Error);
  c = simple_cost(-1, 1, 0.5);
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("warm k=E cache matches the all-hit closed form") {
  const Trace t = synth({50, 6, 8, 2, 0.0, 3});
  EngineConfig cfg = config_for(Policy::kCacheOnly, 8);
  const auto r = replay(t, cfg);
  const CostModel cost = simple_cost(0.003, 0.007, 0.05);
  // Skip the tokens before every expert of every layer has been used once.
  std::size_t warm_from = 0;
  for (std::size_t l = 0; l < 6; ++l) {
    std::vector<bool> seen(8);
    std::size_t n_seen = 0, tok = 0;
    for (; n_seen < 8; ++tok)
      for (auto e : t.at(tok, l).experts) n_seen += !seen[e], seen[e] = true;
    warm_from = std::max(warm_from, tok);
  }
  REQUIRE(warm_from < 40);
  const std::span<const StepMark> warm(r.steps.begin() + static_cast<long>(warm_from * 6),
                                       r.steps.end());
  const auto lr = simulate_latency(r.events, warm, cost, 2);
  REQUIRE(lr.token_latency.size() == 50 - warm_from);
  const double expected = 6 * (0.003 + 2 * 0.007);
  for (double v : lr.token_latency) CHECK(std::abs(v - expected) <= 1e-9);
  CHECK(lr.stalled == 0.0);
  CHECK(lr.tokens_per_sec == doctest::Approx(1.0 / expected).epsilon(1e-12));
}

TEST_CASE("naive policy matches its closed form") {
  const Trace t = synth({40, 5, 8, 2, 0.3, 4});
  const CostModel cost = simple_cost(0.002, 0.004, 0.011);
  const auto lr = simulate(t, nullptr, config_for(Policy::kNaive), cost);
  REQUIRE(lr.token_latency.size() == 40);
  const double expected = 5 * (0.002 + 2 * 0.004 + 8 * 0.011);
  for (double v : lr.token_latency) CHECK(std::abs(v - expected) <= 1e-9);
  CHECK(lr.overlapped == 0.0);
}

TEST_CASE("transfer time is conserved and the breakdown sums to the total") {
  const Model model = Model::initialize(test::tiny_config());
  const Trace t = recorded_trace(model, 5, 6, 40);
  for (bool overlap : {true, false}) {
    for (Policy p : {Policy::kFull, Policy::kCacheOnly, Policy::kNoCache, Policy::kNaive}) {
      CostModel cost = simple_cost(0.001, 0.002, 0.009);
      cost.overlap = overlap;
      const auto r = replay(t, config_for(p), &model);
      const auto lr = simulate_latency(r.events, r.steps, cost, 2);
      const std::size_t loads =
          count(r, EventKind::kMissLoad) + count(r, EventKind::kSpeculativeLoad);
      const double moved = static_cast<double>(loads) * cost.transfer_time();
      CHECK(std::abs(lr.stalled + lr.overlapped + lr.residual_transfer - moved) <= 1e-9 * moved);
      double sum = lr.prefill_time;
      for (double v : lr.token_latency) sum += v;
      CHECK(std::abs(sum - lr.total()) <= 1e-9 * sum);
      CHECK(lr.h2d_bytes == loads * 9);
      if (!overlap) CHECK(lr.residual_transfer == 0.0);
    }
  }
}

TEST_CASE("overlap never hurts") {
  const Model model = Model::initialize(test::tiny_config());
  const Trace t = recorded_trace(model, 6, 4, 40);
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    CostModel cost = simple_cost(rng.uniform() * 0.01, rng.uniform() * 0.01,
                                 rng.uniform() * 0.05 + 1e-4);
    const auto r = replay(t, config_for(Policy::kFull, 1 + trial % 4), &model);
    const auto with = simulate_latency(r.events, r.steps, cost, 2);
    cost.overlap = false;
    const auto without = simulate_latency(r.events, r.steps, cost, 2);
    CHECK(with.total() <= without.total());
    CHECK(with.tokens_per_sec >= without.tokens_per_sec);
  }
}

TEST_CASE("policy dominance holds for random cost models") {
  const Model model = Model::initialize(test::tiny_config());
  Rng rng(12);
  for (int trial = 0; trial < 24; ++trial) {
    const Trace t = recorded_trace(model, 100 + trial, trial % 3 == 0 ? 1 : 5, 30);
    const std::size_t k = trial % 4;
    const std::size_t m = 1 + trial % 2;
    const CostModel cost = simple_cost(rng.uniform() * 0.01 + 1e-5, rng.uniform() * 0.01 + 1e-5,
                                       rng.uniform() * 0.05 + 1e-4);
    double tps[4];
    std::size_t misses[4];
    int i = 0;
    for (Policy p : {Policy::kFull, Policy::kCacheOnly, Policy::kNoCache, Policy::kNaive}) {
      const auto r = replay(t, config_for(p, k, m), &model);
      misses[i] = count(r, EventKind::kMissLoad);
      tps[i++] = simulate_latency(r.events, r.steps, cost, 2).tokens_per_sec;
    }
    for (int j = 0; j < 3; ++j) {
      CAPTURE(trial);
      CAPTURE(j);
      CHECK(tps[j] >= tps[j + 1]);
      if (misses[j] != misses[j + 1]) CHECK(tps[j] > tps[j + 1]);
    }
  }
}

TEST_CASE("ablation suite rows") {
  const Model model = Model::initialize(test::tiny_config());
  const Trace t = recorded_trace(model, 7, 4, 40);
  const CostModel cost = simple_cost(0.002, 0.003, 0.01);
  const std::vector<std::size_t> ks{0, 1, 2, 4, 8};
  const std::vector<std::size_t> ms{0, 1, 2};
  const auto rows = ablation_suite(t, &model, cost, config_for(Policy::kFull), ks, ms);
  REQUIRE(rows.size() == 4 + ks.size() + ms.size());
  CHECK(rows[0].policy == "full");
  CHECK(rows[1].policy == "cache_only");
  CHECK(rows[2].policy == "no_cache");
  CHECK(rows[3].policy == "naive");
  CHECK(rows[1].m == 0);
  CHECK(rows[2].k == 0);
  for (int j = 0; j < 3; ++j) CHECK(rows[j].tokens_per_sec > rows[j + 1].tokens_per_sec);
  // m=0 is the cache-only row.
  const auto& m0 = rows[4 + ks.size()];
  CHECK(m0.m == 0);
  CHECK(m0.recall == rows[1].recall);
  CHECK(m0.tokens_per_sec == rows[1].tokens_per_sec);
  CHECK(m0.stall_frac == rows[1].stall_frac);
  CHECK(rows[4 + ks.size() + 2].tokens_per_sec == rows[0].tokens_per_sec);

  std::ostringstream os;
  write_csv(os, std::span<const AblationRow>(rows));
  CHECK(os.str().rfind("policy,k,m,recall,tokens_per_sec,stall_frac\nfull,2,2,", 0) == 0);
}

TEST_CASE("k sweep recall is nondecreasing on a locality 0.5 trace") {
  const Trace t = synth({2000, 4, 8, 2, 0.5, 8});
  const CostModel cost = simple_cost(0.002, 0.003, 0.01);
  const std::vector<std::size_t> ks{0, 1, 2, 4, 8};
  const auto rows = ablation_suite(t, nullptr, cost, config_for(Policy::kCacheOnly), ks, {});
  REQUIRE(rows.size() == 3 + ks.size());
  CHECK(rows[0].policy == "cache_only");
  CHECK(rows[3].recall == 0.0);
  for (std::size_t i = 4; i < rows.size(); ++i) CHECK(rows[i].recall >= rows[i - 1].recall);
  CHECK(rows.back().recall > 0.99);
}

TEST_CASE("speculative ablation rows need hidden states and the model") {
  const Trace t = synth({20, 4, 8, 2, 0.5, 8});
  const CostModel cost = simple_cost(0.002, 0.003, 0.01);
  const std::vector<std::size_t> ms{1, 2};
  const auto rows = ablation_suite(t, nullptr, cost, config_for(Policy::kFull), {}, ms);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) CHECK(r.policy != "full");

  const Model model = Model::initialize(test::tiny_config());
  Trace other = recorded_trace(model, 3, 2, 5);
  other.header.config_digest = "something else";
  CHECK_THROWS_AS(ablation_suite(other, &model, cost, config_for(Policy::kFull), {}, {}), Error);
}

TEST_CASE("recall curves") {
  const Model model = Model::initialize(test::tiny_config());
  std::vector<Trace> traces{recorded_trace(model, 1, 3, 30), recorded_trace(model, 2, 1, 30)};
  const std::vector<std::size_t> ks{0, 1, 2, 4, 8}, las{1, 2, 3}, ms{1, 2};
  const auto pts = recall_curves(traces, &model, ks, las, ms);
  REQUIRE(pts.size() == ks.size() + las.size() * ms.size());
  CHECK(pts[0].recall == 0.0);
  for (std::size_t i = 1; i < ks.size(); ++i) CHECK(pts[i].recall >= pts[i - 1].recall);
  CHECK(pts[ks.size() - 1].recall < 1.0);  // cold misses
  for (std::size_t i = ks.size(); i < pts.size(); ++i) {
    CHECK(pts[i].kind == "speculative");
    CHECK(pts[i].recall >= 0.0);
    CHECK(pts[i].recall <= 1.0);
  }
  // m=2 guesses contain the m=1 guess.
  CHECK(pts[ks.size() + 1].recall >= pts[ks.size()].recall);

  const auto lru_only = recall_curves(traces, nullptr, ks, las, ms);
  CHECK(lru_only.size() == ks.size());
  std::ostringstream os;
  write_csv(os, std::span<const RecallPoint>(pts));
  CHECK(os.str().rfind("kind,k_or_m,lookahead,recall\nlru,0,0,0\n", 0) == 0);
}

TEST_CASE("Mixtral calibration lands full in the plausible band") {
  const CostModel cost = CostModel::mixtral_calibration(QuantScheme::preset(2));
  CHECK(cost.expert_bytes == doctest::Approx(3.0 * 4096 * 14336 * 2.75 / 8));
  auto cfg = test::tiny_config();
  cfg.n_layers = 32;
  cfg.max_seq_len = 128;
  const Model model = Model::initialize(cfg);
  const Trace t = recorded_trace(model, 9, 8, 64);
  const auto rows = ablation_suite(t, &model, cost, config_for(Policy::kFull), {}, {});
  for (const auto& r : rows) MESSAGE(r.policy << " " << r.recall << " " << r.tokens_per_sec);
  CHECK(rows[0].tokens_per_sec >= 1.0);
  CHECK(rows[0].tokens_per_sec <= 10.0);
  for (int j = 0; j < 3; ++j) CHECK(rows[j].tokens_per_sec > rows[j + 1].tokens_per_sec);
}

}  // TEST_SUITE
