// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace moe {

// Row-major dense matrix of 32-bit floats.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  std::size_t size() const { return data.size(); }
  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline constexpr float kRmsEps = 1e-5f;

// The kernels below fix the floating-point summation order. Every forward
// path in the library goes through them, which is what makes offloaded and
// dense execution bit-identical.

inline float dot(const float* a, const float* b, std::size_t n) {
  float s[8] = {0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) s[j] += a[i + j] * b[i + j];
  for (; i < n; ++i) s[0] += a[i] * b[i];
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
}

// y = W x for W stored row-major as rows x cols.
inline void matvec(const float* w, std::size_t rows, std::size_t cols, const float* x, float* y) {
  for (std::size_t r = 0; r < rows; ++r) y[r] = dot(w + r * cols, x, cols);
}

inline void matvec(const Matrix& w, std::span<const float> x, std::span<float> y) {
  matvec(w.data.data(), w.rows, w.cols, x.data(), y.data());
}

// y += a * x
inline void axpy(float a, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// x_grad += W^T g
inline void matvec_t_acc(const float* w, std::size_t rows, std::size_t cols, const float* g,
                         float* x_grad) {
  for (std::size_t r = 0; r < rows; ++r) axpy(g[r], w + r * cols, x_grad, cols);
}

// dW += g x^T
inline void outer_acc(float* dw, std::size_t rows, std::size_t cols, const float* g,
                      const float* x) {
  for (std::size_t r = 0; r < rows; ++r) axpy(g[r], x, dw + r * cols, cols);
}

// Returns 1/rms so callers can reuse it for the backward pass.
inline float rmsnorm(const float* x, const float* gain, std::size_t n, float* out) {
  const float ms = dot(x, x, n) / static_cast<float>(n);
  const float inv = 1.0f / std::sqrt(ms + kRmsEps);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * inv * gain[i];
  return inv;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

inline bool all_finite(std::span<const float> v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace moe
