#pragma once

// Straight-loop reference implementations, written without any convcut
// code beyond the Tensor container, plus small helpers shared by the unit
// and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <vector>

#include "convcut/rng.hpp"
#include "convcut/tensor.hpp"

namespace oracle {

using convcut::Rng;
using convcut::Shape;
using convcut::Tensor;

inline Tensor random(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<float> v(shape.numel());
  for (float& x : v) x = static_cast<float>(scale * rng.normal());
  return Tensor(std::move(shape), std::move(v));
}

inline double max_abs_diff(const Tensor& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(double(a[i]) - b[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](float x, float y) { return std::memcmp(&x, &y, sizeof x) == 0; });
}

struct Geometry {
  std::size_t out, pad;
};

// valid: floor((n - k) / s) + 1; same: ceil(n / s), zero padding split with
// the odd one after.
inline Geometry geometry(std::size_t n, std::size_t k, std::size_t s, bool same) {
  if (!same) return {(n - k) / s + 1, 0};
  const std::size_t out = (n + s - 1) / s;
  const std::size_t need = (out - 1) * s + k;
  const std::size_t total = need > n ? need - n : 0;
  return {out, total / 2};
}

inline std::vector<double> matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += double(a[i * k + p]) * b[p * n + j];
  return c;
}

inline std::vector<double> softmax_rows(const std::vector<double>& x, std::size_t n) {
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < x.size() / n; ++r) {
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[r * n + j]);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = std::exp(x[r * n + j]) / z;
  }
  return y;
}

inline std::vector<double> layer_norm(const Tensor& x, const std::vector<double>& gamma,
                                      const std::vector<double>& beta, double eps) {
  const std::size_t c = x.shape().back();
  std::vector<double> y(x.numel());
  for (std::size_t r = 0; r < x.numel() / c; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x[r * c + j];
    mu /= double(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x[r * c + j] - mu) * (x[r * c + j] - mu);
    var /= double(c);
    for (std::size_t j = 0; j < c; ++j)
      y[r * c + j] = gamma[j] * (x[r * c + j] - mu) / std::sqrt(var + eps) + beta[j];
  }
  return y;
}

// x [B,H,W,C], kernel [k,k,C]
inline std::vector<double> depthwise(const Tensor& x, const Tensor& kernel, std::size_t stride,
                                     bool same) {
  const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
  const std::size_t k = kernel.shape()[0];
  const Geometry gy = geometry(H, k, stride, same), gx = geometry(W, k, stride, same);
  std::vector<double> y(B * gy.out * gx.out * C, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < gy.out; ++i)
      for (std::size_t j = 0; j < gx.out; ++j)
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0.0;
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v) {
              const long yy = long(i * stride + u) - long(gy.pad);
              const long xx = long(j * stride + v) - long(gx.pad);
              if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
              s += double(x[((b * H + yy) * W + xx) * C + c]) * kernel[(u * k + v) * C + c];
            }
          y[((b * gy.out + i) * gx.out + j) * C + c] = s;
        }
  return y;
}

// x [B,H,W,Cin], kernel [k,k,Cin,Cout], bias [Cout]
inline std::vector<double> conv(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                                std::size_t stride, bool same) {
  const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], Ci = x.shape()[3];
  const std::size_t k = kernel.shape()[0], Co = kernel.shape()[3];
  const Geometry gy = geometry(H, k, stride, same), gx = geometry(W, k, stride, same);
  std::vector<double> y(B * gy.out * gx.out * Co, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < gy.out; ++i)
      for (std::size_t j = 0; j < gx.out; ++j)
        for (std::size_t o = 0; o < Co; ++o) {
          double s = bias[o];
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v)
              for (std::size_t c = 0; c < Ci; ++c) {
                const long yy = long(i * stride + u) - long(gy.pad);
                const long xx = long(j * stride + v) - long(gx.pad);
                if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
                s += double(x[((b * H + yy) * W + xx) * Ci + c]) *
                     kernel[((u * k + v) * Ci + c) * Co + o];
              }
          y[((b * gy.out + i) * gx.out + j) * Co + o] = s;
        }
  return y;
}

// x [B,H,W,Cin], kernel [Cin,Cout], bias [Cout]
inline std::vector<double> pointwise(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  const std::size_t Ci = kernel.shape()[0], Co = kernel.shape()[1];
  const std::size_t pixels = x.numel() / Ci;
  std::vector<double> y(pixels * Co);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t o = 0; o < Co; ++o) {
      double s = bias[o];
      for (std::size_t c = 0; c < Ci; ++c) s += double(x[p * Ci + c]) * kernel[c * Co + o];
      y[p * Co + o] = s;
    }
  return y;
}

inline std::vector<double> spatial_mean(const Tensor& x) {
  const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
  std::vector<double> y(B * C, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) s += x[((b * H + i) * W + j) * C + c];
      y[b * C + c] = s / double(H * W);
    }
  return y;
}

// tokens [T,d], projections [d,q]: softmax(Q K^T / sqrt(q)) V
inline std::vector<double> attention(const Tensor& tokens, const Tensor& wq, const Tensor& wk,
                                     const Tensor& wv) {
  const std::size_t T = tokens.shape()[0], q = wq.shape()[1];
  const auto Q = matmul(tokens, wq), K = matmul(tokens, wk), V = matmul(tokens, wv);
  std::vector<double> s(T * T, 0.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) {
      for (std::size_t p = 0; p < q; ++p) s[i * T + j] += Q[i * q + p] * K[j * q + p];
      s[i * T + j] /= std::sqrt(double(q));
    }
  const auto a = softmax_rows(s, T);
  std::vector<double> out(T * q, 0.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j)
      for (std::size_t p = 0; p < q; ++p) out[i * q + p] += a[i * T + j] * V[j * q + p];
  return out;
}

inline std::vector<double> as_double(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

inline Tensor as_tensor(Shape shape, const std::vector<double>& v) {
  return Tensor(std::move(shape), std::vector<float>(v.begin(), v.end()));
}

}  // namespace oracle
