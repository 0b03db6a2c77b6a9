// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "moe/error.hpp"

namespace moe {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw Error(ErrorCode::kInvalidArgument, std::string(name) + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ffn, "d_ffn");
  positive(n_experts, "n_experts");
  positive(top_k_gate, "top_k_gate");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0)
    throw Error(ErrorCode::kInvalidArgument, "d_model must be divisible by n_heads");
  if (top_k_gate > n_experts)
    throw Error(ErrorCode::kInvalidArgument, "top_k_gate must not exceed n_experts");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j = {
      {"vocab_size", vocab_size}, {"d_model", d_model},       {"n_layers", n_layers},
      {"n_heads", n_heads},       {"d_ffn", d_ffn},           {"n_experts", n_experts},
      {"top_k_gate", top_k_gate}, {"max_seq_len", max_seq_len}, {"seed", seed},
  };
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ffn = j.at("d_ffn").get<std::size_t>();
    c.n_experts = j.at("n_experts").get<std::size_t>();
    c.top_k_gate = j.at("top_k_gate").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ModelConfig::digest() const {
  const std::string s = to_json();
  return hex64(fnv1a64(s.data(), s.size()));
}

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  ModelParams p;
  p.tok_emb = Matrix(cfg.vocab_size, d);
  p.pos_emb = Matrix(cfg.max_seq_len, d);
  p.layers.resize(cfg.n_layers);
  for (auto& L : p.layers) {
    L.attn_norm.assign(d, 0.0f);
    L.wq = Matrix(d, d);
    L.wk = Matrix(d, d);
    L.wv = Matrix(d, d);
    L.wo = Matrix(d, d);
    L.moe_norm.assign(d, 0.0f);
    L.gate = Matrix(cfg.n_experts, d);
    L.experts.assign(cfg.n_experts, std::vector<float>(cfg.expert_floats(), 0.0f));
  }
  p.final_norm.assign(d, 0.0f);
  p.lm_head = Matrix(cfg.vocab_size, d);
  return p;
}

GateOutcome route(std::span<const float> logits, std::size_t top_k, std::size_t layer,
                  std::size_t token_pos) {
  if (top_k == 0 || top_k > logits.size())
    throw Error(ErrorCode::kInvalidArgument, "top_k must be in [1, n_experts]");
  if (!all_finite(logits)) throw Error(ErrorCode::kNonFinite, "gate logits");

  std::vector<std::uint32_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return logits[a] > logits[b]; });

  GateOutcome out;
  out.layer = layer;
  out.token_pos = token_pos;
  out.logits.assign(logits.begin(), logits.end());
  const float top = logits[order[0]];
  float sum = 0.0f;
  for (std::size_t i = 0; i < top_k; ++i) {
    out.experts.push_back({static_cast<std::uint32_t>(layer), order[i]});
    const float w = std::exp(logits[order[i]] - top);
    out.weights.push_back(w);
    sum += w;
  }
  for (float& w : out.weights) w /= sum;
  return out;
}

void swiglu(const ExpertView& e, std::size_t d_model, std::size_t d_ffn, std::span<const float> x,
            std::span<float> out) {
  std::vector<float> g(d_ffn), u(d_ffn);
  matvec(e.w_gate, d_ffn, d_model, x.data(), g.data());
  matvec(e.w_up, d_ffn, d_model, x.data(), u.data());
  for (std::size_t i = 0; i < d_ffn; ++i) g[i] = silu(g[i]) * u[i];
  matvec(e.w_down, d_model, d_ffn, g.data(), out.data());
}

Model::Model(ModelConfig cfg, ModelParams params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  const auto ref = ModelParams::zeros(cfg_);
  bool ok = params_.layers.size() == ref.layers.size();
  if (ok) {
    std::vector<std::size_t> want, got;
    for_each_tensor(ref, [&](const std::string&, const auto&, auto s) { want.push_back(s.size()); });
    for_each_tensor(params_, [&](const std::string&, const auto&, auto s) { got.push_back(s.size()); });
    ok = want == got;
  }
  if (!ok) throw Error(ErrorCode::kInvalidArgument, "parameter shapes do not match config");
}

Model Model::initialize(const ModelConfig& cfg) {
  ModelParams p = ModelParams::zeros(cfg);
  Rng rng(cfg.seed);
  auto fill = [&](std::span<float> v, double stddev) {
    for (float& x : v) x = static_cast<float>(rng.normal() * stddev);
  };
  const double d = static_cast<double>(cfg.d_model);
  const double f = static_cast<double>(cfg.d_ffn);
  const double depth = std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  fill(p.tok_emb.data, 0.5);
  fill(p.pos_emb.data, 0.1);
  for (auto& L : p.layers) {
    std::fill(L.attn_norm.begin(), L.attn_norm.end(), 1.0f);
    std::fill(L.moe_norm.begin(), L.moe_norm.end(), 1.0f);
    fill(L.wq.data, 1.0 / std::sqrt(d));
    fill(L.wk.data, 1.0 / std::sqrt(d));
    fill(L.wv.data, 1.0 / std::sqrt(d));
    fill(L.wo.data, 1.0 / std::sqrt(d) / depth);
    fill(L.gate.data, 1.0 / std::sqrt(d));
    const std::size_t fd = cfg.d_ffn * cfg.d_model;
    for (auto& e : L.experts) {
      fill(std::span(e).subspan(0, 2 * fd), 1.0 / std::sqrt(d));
      fill(std::span(e).subspan(2 * fd), 1.0 / std::sqrt(f) / depth);
    }
  }
  std::fill(p.final_norm.begin(), p.final_norm.end(), 1.0f);
  fill(p.lm_head.data, 1.0 / std::sqrt(d));
  return Model(cfg, std::move(p));
}

std::vector<float> Model::embed(std::uint32_t token, std::size_t pos) const {
  if (token >= cfg_.vocab_size)
    throw Error(ErrorCode::kOutOfRange, "token id " + std::to_string(token) + " >= vocab_size");
  if (pos >= cfg_.max_seq_len)
    throw Error(ErrorCode::kOutOfRange, "position " + std::to_string(pos) + " >= max_seq_len");
  std::vector<float> h(cfg_.d_model);
  auto te = params_.tok_emb.row(token);
  auto pe = params_.pos_emb.row(pos);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = te[i] + pe[i];
  return h;
}

void Model::attention(std::size_t layer, KvCache& cache, std::size_t pos,
                      std::span<float> h) const {
  const std::size_t d = cfg_.d_model;
  const std::size_t hd = cfg_.head_dim();
  const auto& L = params_.layers.at(layer);
  if (cache.length(layer, d) != pos)
    throw Error(ErrorCode::kInvalidArgument, "kv cache length does not match position");

  std::vector<float> xn(d), q(d), k(d), v(d);
  rmsnorm(h.data(), L.attn_norm.data(), d, xn.data());
  matvec(L.wq, xn, q);
  matvec(L.wk, xn, k);
  matvec(L.wv, xn, v);
  auto& keys = cache.keys[layer];
  auto& values = cache.values[layer];
  keys.insert(keys.end(), k.begin(), k.end());
  values.insert(values.end(), v.begin(), v.end());

  const std::size_t n = pos + 1;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> o(d, 0.0f), scores(n);
  for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
    const std::size_t off = head * hd;
    float mx = -INFINITY;
    for (std::size_t s = 0; s < n; ++s) {
      scores[s] = dot(q.data() + off, keys.data() + s * d + off, hd) * scale;
      mx = std::max(mx, scores[s]);
    }
    float sum = 0.0f;
    for (std::size_t s = 0; s < n; ++s) {
      scores[s] = std::exp(scores[s] - mx);
      sum += scores[s];
    }
    for (std::size_t s = 0; s < n; ++s)
      axpy(scores[s] / sum, values.data() + s * d + off, o.data() + off, hd);
  }
  std::vector<float> a(d);
  matvec(L.wo, o, a);
  for (std::size_t i = 0; i < d; ++i) h[i] += a[i];
}

std::vector<float> Model::gate_logits(std::size_t layer, std::span<const float> h) const {
  if (layer >= cfg_.n_layers) throw Error(ErrorCode::kOutOfRange, "gate layer out of range");
  if (h.size() != cfg_.d_model)
    throw Error(ErrorCode::kInvalidArgument, "hidden state has wrong width");
  if (!all_finite(h)) throw Error(ErrorCode::kNonFinite, "pre-MoE hidden state at layer " +
                                                             std::to_string(layer));
  const auto& L = params_.layers[layer];
  std::vector<float> hn(cfg_.d_model), logits(cfg_.n_experts);
  rmsnorm(h.data(), L.moe_norm.data(), cfg_.d_model, hn.data());
  matvec(L.gate, hn, logits);
  return logits;
}

GateOutcome Model::gate(std::size_t layer, std::span<const float> h, std::size_t token_pos) const {
  const auto logits = gate_logits(layer, h);
  return route(logits, cfg_.top_k_gate, layer, token_pos);
}

void Model::moe_forward(std::size_t layer, std::span<float> h, const GateOutcome& outcome,
                        std::span<const ExpertView> experts) const {
  if (experts.size() != outcome.experts.size())
    throw Error(ErrorCode::kInvalidArgument, "expert weights do not match gate outcome");
  for (const auto& e : experts)
    if (!e.w_gate || !e.w_up || !e.w_down)
      throw Error(ErrorCode::kInvalidArgument, "unresolved expert weights");
  const std::size_t d = cfg_.d_model;
  const auto& L = params_.layers.at(layer);
  std::vector<float> hn(d), y(d);
  rmsnorm(h.data(), L.moe_norm.data(), d, hn.data());
  std::vector<float> acc(h.begin(), h.end());
  for (std::size_t i = 0; i < experts.size(); ++i) {
    swiglu(experts[i], d, cfg_.d_ffn, hn, y);
    axpy(outcome.weights[i], y.data(), acc.data(), d);
  }
  std::copy(acc.begin(), acc.end(), h.begin());
}

std::vector<float> Model::logits(std::span<const float> h) const {
  std::vector<float> hn(cfg_.d_model), out(cfg_.vocab_size);
  rmsnorm(h.data(), params_.final_norm.data(), cfg_.d_model, hn.data());
  matvec(params_.lm_head, hn, out);
  if (!all_finite(out)) throw Error(ErrorCode::kNonFinite, "output logits");
  return out;
}

ExpertView Model::expert(ExpertKey key) const {
  if (key.layer >= cfg_.n_layers || key.expert >= cfg_.n_experts)
    throw Error(ErrorCode::kUnknownKey, "expert " + to_string(key));
  return ExpertView::from_block(params_.layers[key.layer].experts[key.expert].data(),
                                cfg_.d_model, cfg_.d_ffn);
}

std::vector<std::vector<float>> dense_forward(const Model& model,
                                              std::span<const std::uint32_t> tokens) {
  const auto& cfg = model.config();
  KvCache cache(cfg.n_layers);
  std::vector<std::vector<float>> out;
  out.reserve(tokens.size());
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    auto h = model.embed(tokens[pos], pos);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      model.attention(l, cache, pos, h);
      const auto outcome = model.gate(l, h, pos);
      std::vector<ExpertView> views;
      for (const auto& key : outcome.experts) views.push_back(model.expert(key));
      model.moe_forward(l, h, outcome, views);
    }
    out.push_back(model.logits(h));
  }
  return out;
}

Sampler::Sampler(std::optional<std::uint64_t> seed) {
  if (seed) rng_.emplace(*seed);
}

std::uint32_t Sampler::sample(std::span<const float> logits) {
  if (logits.empty()) throw Error(ErrorCode::kInvalidArgument, "empty logits");
  if (!all_finite(logits)) throw Error(ErrorCode::kNonFinite, "sampling logits");
  const auto best = std::max_element(logits.begin(), logits.end());
  if (!rng_) return static_cast<std::uint32_t>(best - logits.begin());

  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - *best);
    sum += p[i];
  }
  double u = rng_->uniform() * sum;
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return static_cast<std::uint32_t>(i);
  }
  return static_cast<std::uint32_t>(p.size() - 1);
}

}  // namespace moe
