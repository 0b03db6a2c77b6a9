// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moe/model.hpp"

namespace moe {

// Seeded order-2 Markov chain over a token vocabulary. Each (prev2, prev1)
// context has a handful of likely successors, so context predicts routing.
class MarkovCorpus {
 public:
  MarkovCorpus(std::size_t vocab_size, std::uint64_t seed, std::size_t branching = 4);

  std::vector<std::uint32_t> sample(std::size_t length, Rng& rng) const;
  std::size_t vocab_size() const { return vocab_; }

 private:
  std::size_t vocab_;
  std::size_t branching_;
  std::vector<std::uint32_t> next_;  // [context][branching]
  std::vector<double> cdf_;          // [context][branching]
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t seq_len = 32;
  std::size_t batch = 2;
  double learning_rate = 3e-3;
  double grad_clip = 1.0;
  std::uint64_t corpus_seed = 1;
  std::size_t eval_sequences = 8;
};

struct TrainResult {
  Model model;
  double initial_loss = 0.0;  // held-out cross-entropy before the first step
  double final_loss = 0.0;    // same held-out set after the last step
  std::vector<double> step_losses;
};

// Trains from Model::initialize(cfg). Fully deterministic given cfg.seed and
// the corpus seed; aborts with kDiverged if the loss goes non-finite.
TrainResult train_toy(const ModelConfig& cfg, const TrainConfig& tcfg);

// Mean next-token cross-entropy over `seq` (predicting seq[1..] from seq[..n-1]).
double cross_entropy(const Model& model, std::span<const std::uint32_t> seq);

// Loss and parameter gradients for one sequence, with the loss scaled by
// `loss_scale`. Gradients accumulate into `grads`.
double loss_and_grad(const Model& model, std::span<const std::uint32_t> seq, ModelParams& grads,
                     float loss_scale = 1.0f);

// Mean entropy (nats) of the full softmax over gate logits, per layer.
std::vector<double> gate_entropy(const Model& model,
                                 std::span<const std::vector<std::uint32_t>> sequences);

}  // namespace moe
