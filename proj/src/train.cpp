// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/train.hpp"

#include <algorithm>
#include <cmath>

#include "moe/error.hpp"

namespace moe {

MarkovCorpus::MarkovCorpus(std::size_t vocab_size, std::uint64_t seed, std::size_t branching)
    : vocab_(vocab_size), branching_(std::min(branching, vocab_size)) {
  if (vocab_ == 0 || branching_ == 0)
    throw Error(ErrorCode::kInvalidArgument, "markov corpus needs a nonempty vocabulary");
  Rng rng(seed);
  // Successors of (prev2, prev1) are drawn from a small pool owned by prev1,
  // so the chain has a learnable first-order component on top of the
  // second-order one.
  const std::size_t pool_size = std::min(vocab_, 2 * branching_);
  std::vector<std::uint32_t> perm(vocab_);
  std::vector<std::vector<std::uint32_t>> pools(vocab_);
  auto shuffle_prefix = [&](std::vector<std::uint32_t>& v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) std::swap(v[i], v[i + rng.below(v.size() - i)]);
  };
  for (auto& pool : pools) {
    for (std::size_t i = 0; i < vocab_; ++i) perm[i] = static_cast<std::uint32_t>(i);
    shuffle_prefix(perm, pool_size);
    pool.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(pool_size));
  }

  const std::size_t contexts = vocab_ * vocab_;
  next_.resize(contexts * branching_);
  cdf_.resize(contexts * branching_);
  for (std::size_t c = 0; c < contexts; ++c) {
    auto pool = pools[c % vocab_];
    shuffle_prefix(pool, branching_);
    double total = 0.0;
    for (std::size_t i = 0; i < branching_; ++i) {
      next_[c * branching_ + i] = pool[i];
      const double u = 0.05 + rng.uniform();
      total += u * u * u;
      cdf_[c * branching_ + i] = total;
    }
    for (std::size_t i = 0; i < branching_; ++i) cdf_[c * branching_ + i] /= total;
  }
}

std::vector<std::uint32_t> MarkovCorpus::sample(std::size_t length, Rng& rng) const {
  std::vector<std::uint32_t> out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    if (i < 2) {
      out.push_back(static_cast<std::uint32_t>(rng.below(vocab_)));
      continue;
    }
    const std::size_t ctx = out[i - 2] * vocab_ + out[i - 1];
    const double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < branching_ && u >= cdf_[ctx * branching_ + k]) ++k;
    out.push_back(next_[ctx * branching_ + k]);
  }
  return out;
}

namespace {

void rmsnorm_backward(const float* x, const float* gain, float inv, const float* dy, std::size_t n,
                      float* dx, float* dgain) {
  float m = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const float u = x[i] * inv;
    dgain[i] += dy[i] * u;
    m += dy[i] * gain[i] * u;
  }
  m /= static_cast<float>(n);
  for (std::size_t i = 0; i < n; ++i) dx[i] += inv * (dy[i] * gain[i] - x[i] * inv * m);
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

struct LayerTape {
  std::vector<float> h_in, inv1, xn1, q, k, v, probs, o, h_mid, inv2, hn2;
  std::vector<GateOutcome> gates;
  std::vector<float> a_gate, a_up, act, y;  // [t][slot][...]
};

// Forward pass over one sequence keeping every intermediate needed by the
// backward pass. Arithmetic mirrors Model's inference kernels.
class Tape {
 public:
  Tape(const Model& model, std::span<const std::uint32_t> seq) : m_(model), cfg_(model.config()) {
    if (seq.size() < 2) throw Error(ErrorCode::kInvalidArgument, "training sequence too short");
    T_ = seq.size() - 1;
    if (T_ > cfg_.max_seq_len) throw Error(ErrorCode::kOutOfRange, "sequence exceeds max_seq_len");
    tokens_.assign(seq.begin(), seq.end());
    forward();
  }

  double loss() const { return loss_; }

  void backward(ModelParams& g, float scale) const;

  const std::vector<LayerTape>& layers() const { return layers_; }

 private:
  void forward();

  const Model& m_;
  const ModelConfig& cfg_;
  std::size_t T_ = 0;
  std::vector<std::uint32_t> tokens_;
  std::vector<LayerTape> layers_;
  std::vector<float> h_last_, invf_, hf_, probs_;
  double loss_ = 0.0;
};

void Tape::forward() {
  const std::size_t d = cfg_.d_model, f = cfg_.d_ffn, E = cfg_.n_experts, K = cfg_.top_k_gate;
  const std::size_t H = cfg_.n_heads, hd = cfg_.head_dim(), T = T_;
  const auto& P = m_.params();

  std::vector<float> h(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    const auto e = m_.embed(tokens_[t], t);
    std::copy(e.begin(), e.end(), h.begin() + t * d);
  }
  layers_.resize(cfg_.n_layers);
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const auto& L = P.layers[l];
    auto& tp = layers_[l];
    tp.h_in = h;
    tp.inv1.resize(T);
    tp.xn1.resize(T * d);
    tp.q.resize(T * d);
    tp.k.resize(T * d);
    tp.v.resize(T * d);
    for (std::size_t t = 0; t < T; ++t) {
      float* xn = &tp.xn1[t * d];
      tp.inv1[t] = rmsnorm(&h[t * d], L.attn_norm.data(), d, xn);
      matvec(L.wq.data.data(), d, d, xn, &tp.q[t * d]);
      matvec(L.wk.data.data(), d, d, xn, &tp.k[t * d]);
      matvec(L.wv.data.data(), d, d, xn, &tp.v[t * d]);
    }
    tp.probs.assign(H * T * T, 0.0f);
    tp.o.assign(T * d, 0.0f);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t head = 0; head < H; ++head) {
        const std::size_t off = head * hd;
        float* p = &tp.probs[(head * T + t) * T];
        float mx = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
          p[s] = dot(&tp.q[t * d + off], &tp.k[s * d + off], hd) * scale;
          mx = std::max(mx, p[s]);
        }
        float sum = 0.0f;
        for (std::size_t s = 0; s <= t; ++s) {
          p[s] = std::exp(p[s] - mx);
          sum += p[s];
        }
        for (std::size_t s = 0; s <= t; ++s) {
          p[s] /= sum;
          axpy(p[s], &tp.v[s * d + off], &tp.o[t * d + off], hd);
        }
      }
    }
    tp.h_mid = h;
    std::vector<float> a(d);
    for (std::size_t t = 0; t < T; ++t) {
      matvec(L.wo.data.data(), d, d, &tp.o[t * d], a.data());
      for (std::size_t i = 0; i < d; ++i) tp.h_mid[t * d + i] += a[i];
    }

    tp.inv2.resize(T);
    tp.hn2.resize(T * d);
    tp.gates.clear();
    tp.a_gate.assign(T * K * f, 0.0f);
    tp.a_up.assign(T * K * f, 0.0f);
    tp.act.assign(T * K * f, 0.0f);
    tp.y.assign(T * K * d, 0.0f);
    h = tp.h_mid;
    std::vector<float> logits(E);
    for (std::size_t t = 0; t < T; ++t) {
      float* hn = &tp.hn2[t * d];
      tp.inv2[t] = rmsnorm(&tp.h_mid[t * d], L.moe_norm.data(), d, hn);
      matvec(L.gate.data.data(), E, d, hn, logits.data());
      tp.gates.push_back(route(logits, K, l, t));
      const auto& g = tp.gates.back();
      for (std::size_t s = 0; s < K; ++s) {
        const auto ev = ExpertView::from_block(L.experts[g.experts[s].expert].data(), d, f);
        const std::size_t fo = (t * K + s) * f;
        matvec(ev.w_gate, f, d, hn, &tp.a_gate[fo]);
        matvec(ev.w_up, f, d, hn, &tp.a_up[fo]);
        for (std::size_t i = 0; i < f; ++i)
          tp.act[fo + i] = silu(tp.a_gate[fo + i]) * tp.a_up[fo + i];
        float* y = &tp.y[(t * K + s) * d];
        matvec(ev.w_down, d, f, &tp.act[fo], y);
        axpy(g.weights[s], y, &h[t * d], d);
      }
    }
  }

  h_last_ = h;
  invf_.resize(T);
  hf_.resize(T * d);
  probs_.resize(T * cfg_.vocab_size);
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    invf_[t] = rmsnorm(&h[t * d], P.final_norm.data(), d, &hf_[t * d]);
    float* p = &probs_[t * cfg_.vocab_size];
    matvec(P.lm_head.data.data(), cfg_.vocab_size, d, &hf_[t * d], p);
    const float mx = *std::max_element(p, p + cfg_.vocab_size);
    double sum = 0.0;
    for (std::size_t i = 0; i < cfg_.vocab_size; ++i) {
      p[i] = std::exp(p[i] - mx);
      sum += p[i];
    }
    for (std::size_t i = 0; i < cfg_.vocab_size; ++i) p[i] = static_cast<float>(p[i] / sum);
    total -= std::log(std::max(static_cast<double>(p[tokens_[t + 1]]), 1e-30));
  }
  loss_ = total / static_cast<double>(T);
}

void Tape::backward(ModelParams& G, float loss_scale) const {
  const std::size_t d = cfg_.d_model, f = cfg_.d_ffn, K = cfg_.top_k_gate;
  const std::size_t H = cfg_.n_heads, hd = cfg_.head_dim(), T = T_, V = cfg_.vocab_size;
  const auto& P = m_.params();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  const float inv_t = loss_scale / static_cast<float>(T);

  std::vector<float> dh(T * d, 0.0f), dlog(V), dhf(d);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < V; ++i) dlog[i] = probs_[t * V + i] * inv_t;
    dlog[tokens_[t + 1]] -= inv_t;
    outer_acc(G.lm_head.data.data(), V, d, dlog.data(), &hf_[t * d]);
    std::fill(dhf.begin(), dhf.end(), 0.0f);
    matvec_t_acc(P.lm_head.data.data(), V, d, dlog.data(), dhf.data());
    rmsnorm_backward(&h_last_[t * d], P.final_norm.data(), invf_[t], dhf.data(), d, &dh[t * d],
                     G.final_norm.data());
  }

  std::vector<float> dhn(d), dy(d), dact(f), dag(f), dau(f), dw(K), dl(K);
  for (std::size_t l = cfg_.n_layers; l-- > 0;) {
    const auto& L = P.layers[l];
    auto& GL = G.layers[l];
    const auto& tp = layers_[l];

    // MoE block.
    std::vector<float> dmid = dh;
    for (std::size_t t = 0; t < T; ++t) {
      const auto& g = tp.gates[t];
      const float* hn = &tp.hn2[t * d];
      const float* dout = &dh[t * d];
      std::fill(dhn.begin(), dhn.end(), 0.0f);
      for (std::size_t s = 0; s < K; ++s) {
        const std::size_t e = g.experts[s].expert;
        const auto ev = ExpertView::from_block(L.experts[e].data(), d, f);
        float* gblock = GL.experts[e].data();
        float* g_gate = gblock;
        float* g_up = gblock + f * d;
        float* g_down = gblock + 2 * f * d;
        const std::size_t fo = (t * K + s) * f;
        dw[s] = dot(dout, &tp.y[(t * K + s) * d], d);
        for (std::size_t i = 0; i < d; ++i) dy[i] = g.weights[s] * dout[i];
        outer_acc(g_down, d, f, dy.data(), &tp.act[fo]);
        std::fill(dact.begin(), dact.end(), 0.0f);
        matvec_t_acc(ev.w_down, d, f, dy.data(), dact.data());
        for (std::size_t i = 0; i < f; ++i) {
          const float a = tp.a_gate[fo + i];
          const float sg = sigmoid(a);
          dag[i] = dact[i] * tp.a_up[fo + i] * (sg + a * sg * (1.0f - sg));
          dau[i] = dact[i] * a * sg;
        }
        outer_acc(g_gate, f, d, dag.data(), hn);
        outer_acc(g_up, f, d, dau.data(), hn);
        matvec_t_acc(ev.w_gate, f, d, dag.data(), dhn.data());
        matvec_t_acc(ev.w_up, f, d, dau.data(), dhn.data());
      }
      float wdw = 0.0f;
      for (std::size_t s = 0; s < K; ++s) wdw += g.weights[s] * dw[s];
      for (std::size_t s = 0; s < K; ++s) {
        dl[s] = g.weights[s] * (dw[s] - wdw);
        const std::size_t e = g.experts[s].expert;
        axpy(dl[s], hn, GL.gate.row(e).data(), d);
        axpy(dl[s], L.gate.row(e).data(), dhn.data(), d);
      }
      rmsnorm_backward(&tp.h_mid[t * d], L.moe_norm.data(), tp.inv2[t], dhn.data(), d,
                       &dmid[t * d], GL.moe_norm.data());
    }

    // Attention block.
    std::vector<float> dO(T * d, 0.0f);
    for (std::size_t t = 0; t < T; ++t) {
      outer_acc(GL.wo.data.data(), d, d, &dmid[t * d], &tp.o[t * d]);
      matvec_t_acc(L.wo.data.data(), d, d, &dmid[t * d], &dO[t * d]);
    }
    std::vector<float> dq(T * d, 0.0f), dk(T * d, 0.0f), dv(T * d, 0.0f), dp(T);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t head = 0; head < H; ++head) {
        const std::size_t off = head * hd;
        const float* p = &tp.probs[(head * T + t) * T];
        const float* dot_ = &dO[t * d + off];
        float sum = 0.0f;
        for (std::size_t s = 0; s <= t; ++s) {
          dp[s] = dot(dot_, &tp.v[s * d + off], hd);
          sum += p[s] * dp[s];
          axpy(p[s], dot_, &dv[s * d + off], hd);
        }
        for (std::size_t s = 0; s <= t; ++s) {
          const float ds = p[s] * (dp[s] - sum) * scale;
          axpy(ds, &tp.k[s * d + off], &dq[t * d + off], hd);
          axpy(ds, &tp.q[t * d + off], &dk[s * d + off], hd);
        }
      }
    }
    dh = dmid;
    std::vector<float> dxn(d);
    for (std::size_t t = 0; t < T; ++t) {
      const float* xn = &tp.xn1[t * d];
      outer_acc(GL.wq.data.data(), d, d, &dq[t * d], xn);
      outer_acc(GL.wk.data.data(), d, d, &dk[t * d], xn);
      outer_acc(GL.wv.data.data(), d, d, &dv[t * d], xn);
      std::fill(dxn.begin(), dxn.end(), 0.0f);
      matvec_t_acc(L.wq.data.data(), d, d, &dq[t * d], dxn.data());
      matvec_t_acc(L.wk.data.data(), d, d, &dk[t * d], dxn.data());
      matvec_t_acc(L.wv.data.data(), d, d, &dv[t * d], dxn.data());
      rmsnorm_backward(&tp.h_in[t * d], L.attn_norm.data(), tp.inv1[t], dxn.data(), d, &dh[t * d],
                       GL.attn_norm.data());
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    axpy(1.0f, &dh[t * d], G.tok_emb.row(tokens_[t]).data(), d);
    axpy(1.0f, &dh[t * d], G.pos_emb.row(t).data(), d);
  }
}

struct Adam {
  std::vector<std::vector<float>> m, v;
  std::size_t step = 0;
};

void collect(ModelParams& p, std::vector<std::span<float>>& out) {
  out.clear();
  for_each_tensor(p, [&](const std::string&, const auto&, std::span<float> s) { out.push_back(s); });
}

}  // namespace

double cross_entropy(const Model& model, std::span<const std::uint32_t> seq) {
  return Tape(model, seq).loss();
}

double loss_and_grad(const Model& model, std::span<const std::uint32_t> seq, ModelParams& grads,
                     float loss_scale) {
  Tape tape(model, seq);
  tape.backward(grads, loss_scale);
  return tape.loss();
}

std::vector<double> gate_entropy(const Model& model,
                                 std::span<const std::vector<std::uint32_t>> sequences) {
  const auto& cfg = model.config();
  std::vector<double> ent(cfg.n_layers, 0.0);
  std::size_t count = 0;
  for (const auto& seq : sequences) {
    KvCache cache(cfg.n_layers);
    for (std::size_t pos = 0; pos < seq.size(); ++pos) {
      auto h = model.embed(seq[pos], pos);
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        model.attention(l, cache, pos, h);
        const auto g = model.gate(l, h, pos);
        const float mx = *std::max_element(g.logits.begin(), g.logits.end());
        double z = 0.0;
        for (float x : g.logits) z += std::exp(static_cast<double>(x) - mx);
        double e = 0.0;
        for (float x : g.logits) {
          const double p = std::exp(static_cast<double>(x) - mx) / z;
          if (p > 0.0) e -= p * std::log(p);
        }
        ent[l] += e;
        std::vector<ExpertView> views;
        for (const auto& key : g.experts) views.push_back(model.expert(key));
        model.moe_forward(l, h, g, views);
      }
      ++count;
    }
  }
  if (count > 0)
    for (double& e : ent) e /= static_cast<double>(count);
  return ent;
}

TrainResult train_toy(const ModelConfig& cfg, const TrainConfig& tcfg) {
  if (tcfg.seq_len < 2 || tcfg.batch < 1)
    throw Error(ErrorCode::kInvalidArgument, "seq_len must be >= 2 and batch >= 1");
  Model model = Model::initialize(cfg);
  const MarkovCorpus corpus(cfg.vocab_size, tcfg.corpus_seed);

  Rng eval_rng(tcfg.corpus_seed ^ 0x5eedf00dULL);
  std::vector<std::vector<std::uint32_t>> eval;
  for (std::size_t i = 0; i < tcfg.eval_sequences; ++i)
    eval.push_back(corpus.sample(tcfg.seq_len + 1, eval_rng));
  auto eval_loss = [&](const Model& m) {
    double s = 0.0;
    for (const auto& seq : eval) s += cross_entropy(m, seq);
    return eval.empty() ? 0.0 : s / static_cast<double>(eval.size());
  };

  TrainResult result{model, eval_loss(model), 0.0, {}};
  if (tcfg.steps == 0) {
    result.final_loss = result.initial_loss;
    return result;
  }

  ModelParams params = model.params();
  ModelParams grads = ModelParams::zeros(cfg);
  std::vector<std::span<float>> ps, gs;
  collect(params, ps);
  collect(grads, gs);
  Adam adam;
  for (auto s : ps) {
    adam.m.emplace_back(s.size(), 0.0f);
    adam.v.emplace_back(s.size(), 0.0f);
  }
  const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
  Rng rng(cfg.seed ^ tcfg.corpus_seed ^ 0x7a11ULL);

  for (std::size_t step = 0; step < tcfg.steps; ++step) {
    for (auto g : gs) std::fill(g.begin(), g.end(), 0.0f);
    const Model current(cfg, params);
    double loss = 0.0;
    for (std::size_t b = 0; b < tcfg.batch; ++b) {
      const auto seq = corpus.sample(tcfg.seq_len + 1, rng);
      loss += loss_and_grad(current, seq, grads, 1.0f / static_cast<float>(tcfg.batch));
    }
    loss /= static_cast<double>(tcfg.batch);
    if (!std::isfinite(loss))
      throw Error(ErrorCode::kDiverged, "training loss non-finite at step " + std::to_string(step));
    result.step_losses.push_back(loss);

    double norm2 = 0.0;
    for (auto g : gs)
      for (float x : g) norm2 += static_cast<double>(x) * x;
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm))
      throw Error(ErrorCode::kDiverged, "gradient non-finite at step " + std::to_string(step));
    const float clip =
        norm > tcfg.grad_clip ? static_cast<float>(tcfg.grad_clip / norm) : 1.0f;

    ++adam.step;
    const float c1 = 1.0f - std::pow(b1, static_cast<float>(adam.step));
    const float c2 = 1.0f - std::pow(b2, static_cast<float>(adam.step));
    const float lr = static_cast<float>(tcfg.learning_rate);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto p = ps[i];
      auto g = gs[i];
      auto& m = adam.m[i];
      auto& v = adam.v[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const float gj = g[j] * clip;
        m[j] = b1 * m[j] + (1.0f - b1) * gj;
        v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
        p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
  }

  result.model = Model(cfg, std::move(params));
  result.final_loss = eval_loss(result.model);
  if (!std::isfinite(result.final_loss))
    throw Error(ErrorCode::kDiverged, "final loss non-finite");
  return result;
}

}  // namespace moe
