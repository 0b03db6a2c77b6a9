// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal deterministic MoE decoder: learned token + position embeddings,
// pre-norm causal multi-head attention, and a top-k gated SwiGLU expert MLP
// per layer, all on a residual stream.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "moe/common.hpp"
#include "moe/tensor.hpp"

namespace moe {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 6;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;
  std::size_t n_experts = 8;
  std::size_t top_k_gate = 2;
  std::size_t max_seq_len = 256;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  // Floats in one expert's contiguous [w_gate | w_up | w_down] block.
  std::size_t expert_floats() const { return 3 * d_model * d_ffn; }
  std::size_t expert_param_count() const { return expert_floats(); }

  // Canonical JSON: sorted keys, no whitespace.
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  std::string digest() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  std::vector<float> attn_norm;  // d_model
  Matrix wq, wk, wv, wo;         // d_model x d_model
  std::vector<float> moe_norm;   // d_model
  Matrix gate;                   // n_experts x d_model
  // One contiguous block per expert: w_gate (d_ffn x d_model),
  // w_up (d_ffn x d_model), w_down (d_model x d_ffn).
  std::vector<std::vector<float>> experts;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ModelParams {
  Matrix tok_emb;  // vocab x d_model
  Matrix pos_emb;  // max_seq_len x d_model
  std::vector<LayerParams> layers;
  std::vector<float> final_norm;
  Matrix lm_head;  // vocab x d_model

  static ModelParams zeros(const ModelConfig& cfg);
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Visits every tensor in a fixed order with a stable dotted name. `P` is
// ModelParams or const ModelParams; the callback receives (name, shape, span).
template <class P, class F>
void for_each_tensor(P& p, F&& fn) {
  using V = std::conditional_t<std::is_const_v<P>, const float, float>;
  auto mat = [&](const std::string& name, auto& m) {
    fn(name, std::vector<std::size_t>{m.rows, m.cols}, std::span<V>(m.data));
  };
  auto vec = [&](const std::string& name, auto& v) {
    fn(name, std::vector<std::size_t>{v.size()}, std::span<V>(v));
  };
  mat("tok_emb", p.tok_emb);
  mat("pos_emb", p.pos_emb);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    vec(pre + "attn_norm", L.attn_norm);
    mat(pre + "wq", L.wq);
    mat(pre + "wk", L.wk);
    mat(pre + "wv", L.wv);
    mat(pre + "wo", L.wo);
    vec(pre + "moe_norm", L.moe_norm);
    mat(pre + "gate", L.gate);
    for (std::size_t e = 0; e < L.experts.size(); ++e)
      vec(pre + "experts." + std::to_string(e), L.experts[e]);
  }
  vec("final_norm", p.final_norm);
  mat("lm_head", p.lm_head);
}

// Read-only view of one expert's weights, wherever they are resident.
struct ExpertView {
  const float* w_gate = nullptr;  // d_ffn x d_model
  const float* w_up = nullptr;    // d_ffn x d_model
  const float* w_down = nullptr;  // d_model x d_ffn

  static ExpertView from_block(const float* block, std::size_t d_model, std::size_t d_ffn) {
    return {block, block + d_ffn * d_model, block + 2 * d_ffn * d_model};
  }
};

struct GateOutcome {
  std::size_t layer = 0;
  std::size_t token_pos = 0;
  std::vector<ExpertKey> experts;  // descending gate weight
  std::vector<float> weights;      // softmax over the selected logits
  std::vector<float> logits;       // all n_experts logits

  friend bool operator==(const GateOutcome&, const GateOutcome&) = default;
};

// Top-k selection with lowest-index tie breaking, followed by a softmax over
// the selected logits only.
GateOutcome route(std::span<const float> logits, std::size_t top_k, std::size_t layer,
                  std::size_t token_pos);

// out = w_down (silu(w_gate x) * (w_up x))
void swiglu(const ExpertView& e, std::size_t d_model, std::size_t d_ffn, std::span<const float> x,
            std::span<float> out);

// Per-layer attention keys/values for one sequence.
struct KvCache {
  std::vector<std::vector<float>> keys;    // [layer][pos * d_model]
  std::vector<std::vector<float>> values;  // [layer][pos * d_model]

  explicit KvCache(std::size_t n_layers = 0) : keys(n_layers), values(n_layers) {}
  std::size_t length(std::size_t layer, std::size_t d_model) const {
    return keys[layer].size() / d_model;
  }
};

class Model {
 public:
  Model(ModelConfig cfg, ModelParams params);

  // Seeded initialization (the state `train_toy` starts from).
  static Model initialize(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const ModelParams& params() const { return params_; }

  std::vector<float> embed(std::uint32_t token, std::size_t pos) const;

  // h += attention(rmsnorm(h)). Appends this position's key/value to the cache;
  // `pos` must equal the cached length at `layer`. Leaves h in pre-MoE state.
  void attention(std::size_t layer, KvCache& cache, std::size_t pos, std::span<float> h) const;

  std::vector<float> gate_logits(std::size_t layer, std::span<const float> h) const;
  // Routes a pre-MoE hidden state through `layer`'s gate.
  GateOutcome gate(std::size_t layer, std::span<const float> h, std::size_t token_pos) const;

  // h += sum_i weights[i] * SwiGLU_i(rmsnorm(h)); `experts` pairs with
  // outcome.experts in order.
  void moe_forward(std::size_t layer, std::span<float> h, const GateOutcome& outcome,
                   std::span<const ExpertView> experts) const;

  std::vector<float> logits(std::span<const float> h) const;

  ExpertView expert(ExpertKey key) const;

 private:
  ModelConfig cfg_;
  ModelParams params_;
};

// Dense in-memory forward pass, one token at a time, reading expert weights
// straight from the model. Returns next-token logits for every position.
std::vector<std::vector<float>> dense_forward(const Model& model,
                                              std::span<const std::uint32_t> tokens);

class Sampler {
 public:
  static Sampler greedy() { return Sampler(std::nullopt); }
  static Sampler categorical(std::uint64_t seed) { return Sampler(seed); }

  std::uint32_t sample(std::span<const float> logits);

 private:
  explicit Sampler(std::optional<std::uint64_t> seed);
  std::optional<Rng> rng_;
};

}  // namespace moe
