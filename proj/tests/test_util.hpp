// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>

#include "moe/model.hpp"

namespace moe::test {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_layers = 4;
  c.n_heads = 2;
  c.d_ffn = 24;
  c.n_experts = 8;
  c.top_k_gate = 2;
  c.max_seq_len = 64;
  c.seed = 42;
  return c;
}

inline Model with_zero_experts(const Model& m) {
  ModelParams p = m.params();
  for (auto& L : p.layers)
    for (auto& e : L.experts) std::fill(e.begin(), e.end(), 0.0f);
  return Model(m.config(), std::move(p));
}

}  // namespace moe::test
