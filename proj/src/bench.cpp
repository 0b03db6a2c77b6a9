// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/bench.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "moe/error.hpp"
#include "moe/replay.hpp"

namespace moe {

double CostModel::effective_bandwidth() const {
  return pinned ? h2d_bandwidth * pinned_bandwidth_multiplier : h2d_bandwidth;
}

double CostModel::transfer_time() const { return expert_bytes / effective_bandwidth(); }

void CostModel::validate() const {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!(std::isfinite(h2d_bandwidth) && h2d_bandwidth > 0.0))
    throw Error(ErrorCode::kInvalidArgument, "h2d_bandwidth must be positive");
  if (!(std::isfinite(pinned_bandwidth_multiplier) && pinned_bandwidth_multiplier >= 1.0))
    throw Error(ErrorCode::kInvalidArgument, "pinned_bandwidth_multiplier must be >= 1");
  if (!finite_nonneg(expert_bytes) || !finite_nonneg(expert_compute_time) ||
      !finite_nonneg(attn_compute_time))
    throw Error(ErrorCode::kInvalidArgument, "cost model times and sizes must be >= 0");
}

CostModel CostModel::mixtral_calibration(const QuantScheme& scheme) {
  constexpr double kExpertParams = 3.0 * 4096.0 * 14336.0;  // d_model 4096, d_ffn 14336
  CostModel c;
  c.h2d_bandwidth = 12e9;
  c.expert_bytes = kExpertParams * bits_per_param(scheme) / 8.0;
  c.attn_compute_time = 3.5e-3;
  c.expert_compute_time = 3e-3;
  return c;
}

double LatencyReport::stall_frac() const {
  const double t = total();
  return t > 0.0 ? stalled / t : 0.0;
}

namespace {

struct Transfer {
  ExpertKey key;
  double remaining = 0.0;
};

class Channel {
 public:
  Channel(LatencyReport& r, double transfer) : r_(r), transfer_(transfer) {}

  // Compute of `length` seconds; queued transfers run underneath it.
  double compute(double length) {
    double left = length;
    while (left > 0.0 && !queue_.empty()) {
      Transfer& t = queue_.front();
      const double d = std::min(left, t.remaining);
      t.remaining = d == t.remaining ? 0.0 : t.remaining - d;
      left -= d;
      r_.overlapped += d;
      if (t.remaining == 0.0) queue_.erase(queue_.begin());
    }
    r_.compute += left;
    return length;
  }

  double stall(double length) {
    r_.stalled += length;
    return length;
  }

  // The newest speculation batch runs ahead of older, likely stale transfers;
  // within a batch, issue order is kept.
  void begin_step() { insert_at_ = 0; }
  void enqueue(const ExpertKey& key) {
    queue_.insert(queue_.begin() + static_cast<std::ptrdiff_t>(insert_at_++), {key, transfer_});
  }

  // Remaining time of the newest queued transfer of `key`, removed from the queue.
  double take(const ExpertKey& key) {
    for (auto it = queue_.rbegin(); it != queue_.rend(); ++it) {
      if (it->key == key) {
        const double rem = it->remaining;
        queue_.erase(std::next(it).base());
        return rem;
      }
    }
    return 0.0;
  }

  double residual() const {
    double s = 0.0;
    for (const auto& t : queue_) s += t.remaining;
    return s;
  }

 private:
  LatencyReport& r_;
  double transfer_;
  std::vector<Transfer> queue_;  // service order
  std::size_t insert_at_ = 0;
};

}  // namespace

LatencyReport simulate_latency(std::span<const StoreEvent> events, std::span<const StepMark> steps,
                               const CostModel& cost, std::size_t top_k) {
  cost.validate();
  LatencyReport r;
  r.cost = cost;
  const double transfer = cost.transfer_time();
  Channel ch(r, transfer);
  std::size_t n_loads = 0;
  bool have_token = false;
  std::uint32_t last_pos = 0;

  for (const auto& s : steps) {
    if (s.event_begin > s.event_end || s.event_end > events.size())
      throw Error(ErrorCode::kOutOfRange, "step events outside the log");
    const double n = s.n_tokens;
    ch.begin_step();
    double lat = ch.compute(cost.attn_compute_time * n);
    for (std::size_t i = s.event_begin; i < s.event_end; ++i) {
      const StoreEvent& e = events[i];
      switch (e.kind) {
        case EventKind::kMissLoad:
          ++n_loads;
          lat += ch.stall(transfer);
          break;
        case EventKind::kSpeculativeLoad:
          ++n_loads;
          if (cost.overlap)
            ch.enqueue(e.key);
          else
            lat += ch.stall(transfer);
          break;
        case EventKind::kStagingHit:
          lat += ch.stall(ch.take(e.key));
          break;
        default:
          break;
      }
    }
    lat += ch.compute(cost.expert_compute_time * static_cast<double>(top_k) * n);

    if (s.prefill) {
      r.prefill_time += lat;
    } else {
      if (!have_token || s.token_pos != last_pos) r.token_latency.push_back(0.0);
      r.token_latency.back() += lat;
      have_token = true;
      last_pos = s.token_pos;
    }
  }
  r.residual_transfer = ch.residual();
  r.h2d_bytes = static_cast<std::uint64_t>(
      std::llround(static_cast<double>(n_loads) * cost.expert_bytes));
  if (!r.token_latency.empty()) {
    double sum = 0.0;
    for (double t : r.token_latency) sum += t;
    const double mean = sum / static_cast<double>(r.token_latency.size());
    r.tokens_per_sec = mean > 0.0 ? 1.0 / mean : 0.0;
  }
  return r;
}

std::vector<AblationRow> ablation_suite(const Trace& trace, const Model* model,
                                        const CostModel& cost, const EngineConfig& base,
                                        std::span<const std::size_t> k_values,
                                        std::span<const std::size_t> m_values) {
  cost.validate();
  std::vector<AblationRow> rows;
  auto run = [&](Policy p, std::size_t k, std::size_t m) {
    EngineConfig c = base;
    c.policy = p;
    c.cache.k = k;
    c.cache.expert_bytes = static_cast<std::size_t>(std::llround(cost.expert_bytes));
    c.spec.m = m;
    const EngineConfig res = c.resolved();
    const ReplayResult rr = replay(trace, c, model);
    const LatencyReport lr = simulate_latency(rr.events, rr.steps, cost, trace.header.top_k);
    rows.push_back({std::string(to_string(p)), res.cache.k, res.spec.active() ? res.spec.m : 0,
                    rr.recall, lr.tokens_per_sec, lr.stall_frac()});
  };
  const bool speculative = model != nullptr && trace.header.records_hidden;
  for (Policy p : {Policy::kFull, Policy::kCacheOnly, Policy::kNoCache, Policy::kNaive})
    if (p != Policy::kFull || speculative) run(p, base.cache.k, base.spec.m);
  for (auto k : k_values) run(Policy::kCacheOnly, k, 0);
  if (speculative)
    for (auto m : m_values) run(Policy::kFull, base.cache.k, m);
  return rows;
}

std::vector<RecallPoint> recall_curves(std::span<const Trace> traces, const Model* model,
                                       std::span<const std::size_t> k_values,
                                       std::span<const std::size_t> lookaheads,
                                       std::span<const std::size_t> m_values) {
  std::vector<RecallPoint> out;
  for (auto k : k_values) {
    std::vector<StoreEvent> pooled;
    for (const auto& t : traces) {
      EngineConfig c;
      c.policy = Policy::kCacheOnly;
      c.cache.k = k;
      const auto rr = replay(t, c);
      pooled.insert(pooled.end(), rr.events.begin(), rr.events.end());
    }
    if (!pooled.empty()) out.push_back({"lru", k, 0, recall(pooled)});
  }

  if (model == nullptr) return out;
  for (const auto& t : traces) {
    if (t.header.records_hidden && t.header.config_digest != model->config().digest())
      throw Error(ErrorCode::kInvalidArgument, "trace was recorded with a different model config");
  }
  for (auto la : lookaheads) {
    for (auto m : m_values) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& t : traces) {
        if (!t.header.records_hidden) continue;
        const std::size_t L = t.header.n_layers;
        for (std::size_t tok = 0; tok < t.n_tokens(); ++tok) {
          for (std::size_t l = 0; l + la < L; ++l) {
            const auto guess = guess_experts(*model, t.at(tok, l).hidden, l + la, m);
            sum += guess_recall(guess, t.at(tok, l + la).experts);
            ++n;
          }
        }
      }
      if (n > 0) out.push_back({"speculative", m, la, sum / static_cast<double>(n)});
    }
  }
  return out;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void write_csv(std::ostream& os, std::span<const AblationRow> rows) {
  os << "policy,k,m,recall,tokens_per_sec,stall_frac\n";
  for (const auto& r : rows)
    os << r.policy << ',' << r.k << ',' << r.m << ',' << num(r.recall) << ','
       << num(r.tokens_per_sec) << ',' << num(r.stall_frac) << '\n';
}

void write_csv(std::ostream& os, std::span<const RecallPoint> points) {
  os << "kind,k_or_m,lookahead,recall\n";
  for (const auto& p : points)
    os << p.kind << ',' << p.k_or_m << ',' << p.lookahead << ',' << num(p.recall) << '\n';
}

}  // namespace moe
