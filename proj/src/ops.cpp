#include "convcut/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "convcut/error.hpp"

namespace convcut::ops {

namespace {

using Span = std::span<const float>;
using Grads = std::span<std::span<float>>;

void check_finite(const char* op, const std::vector<float>& data) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw NumericError(std::string(op) + ": non-finite value at element " + std::to_string(i));
    }
  }
}

Tensor finish(const char* op, Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
              BackwardRule rule) {
  check_finite(op, data);
  return record_op(op, std::move(shape), std::move(data), std::move(inputs), std::move(rule));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                         b.shape().str());
  }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.shape().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         x.shape().str());
  }
}

void require_channel_vector(const char* op, const Tensor& x, const Tensor& v) {
  if (v.shape().rank() != 1 || v.shape()[0] != x.shape().back()) {
    throw DimensionError(std::string(op) + ": expected vector of length " +
                         std::to_string(x.shape().back()) + ", got " + v.shape().str());
  }
}

// Row-major c[m,n] += a[m,k] * b[k,n]. Forward passes accumulate in double.
template <typename Acc>
void gemm_acc(const float* a, const float* b, Acc* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Acc* crow = c + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Acc av = arow[p];
      if (av == 0) continue;
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<float> narrow(const std::vector<double>& acc) {
  return std::vector<float>(acc.begin(), acc.end());
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * k;
      float s = 0.0f;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    const float* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      float* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct ConvDims {
  std::size_t batch, in_h, in_w, channels, k, stride;
  AxisGeometry gy, gx;
};

ConvDims conv_dims(const char* op, const Tensor& x, std::size_t k, std::size_t stride,
                   Padding padding) {
  require_rank(op, x, 4);
  if (stride == 0) throw DimensionError(std::string(op) + ": stride must be >= 1");
  const Shape& s = x.shape();
  ConvDims d{s[0], s[1], s[2], s[3], k, stride, {}, {}};
  try {
    d.gy = conv_axis(s[1], k, stride, padding);
    d.gx = conv_axis(s[2], k, stride, padding);
  } catch (const DimensionError& e) {
    throw DimensionError(std::string(op) + ": " + e.what() + " for input " + s.str());
  }
  return d;
}

}  // namespace

AxisGeometry conv_axis(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (kernel == 0 || stride == 0) throw DimensionError("kernel and stride must be positive");
  AxisGeometry g;
  if (padding == Padding::kValid) {
    if (kernel > in) {
      throw DimensionError("kernel " + std::to_string(kernel) + " larger than input extent " +
                           std::to_string(in));
    }
    g.out = (in - kernel) / stride + 1;
    g.pad_before = 0;
  } else {
    g.out = (in + stride - 1) / stride;
    const std::size_t needed = (g.out - 1) * stride + kernel;
    const std::size_t total = needed > in ? needed - in : 0;
    g.pad_before = total / 2;
    if (kernel > in + total) {
      throw DimensionError("kernel " + std::to_string(kernel) + " larger than padded extent");
    }
  }
  return g;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return finish("add", a.shape(), std::move(out), {a, b}, {[](Span g, Grads gi) {
                  for (auto& dst : gi) {
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
                  }
                }});
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return finish("mul", a.shape(), std::move(out), {a, b}, {[a, b](Span g, Grads gi) {
                  for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i] * b[i];
                  for (std::size_t i = 0; i < gi[1].size(); ++i) gi[1][i] += g[i] * a[i];
                }});
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return finish("scale", x.shape(), std::move(out), {x}, {[factor](Span g, Grads gi) {
                  for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i] * factor;
                }});
}

Tensor add_channel(const Tensor& x, const Tensor& v) {
  require_channel_vector("add_channel", x, v);
  const std::size_t c = v.numel();
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + v[i % c];
  return finish("add_channel", x.shape(), std::move(out), {x, v}, {[c](Span g, Grads gi) {
                  for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i];
                  if (!gi[1].empty()) {
                    for (std::size_t i = 0; i < g.size(); ++i) gi[1][i % c] += g[i];
                  }
                }});
}

Tensor mul_channel(const Tensor& x, const Tensor& v) {
  require_channel_vector("mul_channel", x, v);
  const std::size_t c = v.numel();
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * v[i % c];
  return finish("mul_channel", x.shape(), std::move(out), {x, v}, {[x, v, c](Span g, Grads gi) {
                  for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i] * v[i % c];
                  if (!gi[1].empty()) {
                    for (std::size_t i = 0; i < g.size(); ++i) gi[1][i % c] += g[i] * x[i];
                  }
                }});
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return finish("sum", Shape{1}, {static_cast<float>(acc)}, {x}, {[](Span g, Grads gi) {
                  for (float& d : gi[0]) d += g[0];
                }});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched_a = sa.rank() == 3;
  const bool batched_b = sb.rank() == 3;
  if (!((sa.rank() == 2 || batched_a) && (sb.rank() == 2 || batched_b)) ||
      (batched_b && !batched_a)) {
    throw DimensionError("matmul: unsupported ranks " + sa.str() + " x " + sb.str());
  }
  const std::size_t batch = batched_a ? sa[0] : 1;
  const std::size_t m = sa[sa.rank() - 2];
  const std::size_t k = sa.back();
  const std::size_t kb = sb[sb.rank() - 2];
  const std::size_t n = sb.back();
  if (k != kb || (batched_b && sb[0] != batch)) {
    throw DimensionError("matmul: inner dimensions disagree " + sa.str() + " x " + sb.str());
  }
  const std::size_t b_stride = batched_b ? kb * n : 0;

  std::vector<double> acc(batch * m * n, 0.0);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    gemm_acc(a.data().data() + bi * m * k, b.data().data() + bi * b_stride,
             acc.data() + bi * m * n, m, k, n);
  }
  std::vector<float> out = narrow(acc);
  Shape shape = batched_a ? Shape{batch, m, n} : Shape{m, n};
  return finish("matmul", std::move(shape), std::move(out), {a, b},
                {[a, b, batch, m, k, n, b_stride](Span g, Grads gi) {
                  for (std::size_t bi = 0; bi < batch; ++bi) {
                    const float* gp = g.data() + bi * m * n;
                    // dA = dC . B^T
                    if (!gi[0].empty()) {
                      gemm_nt_acc(gp, b.data().data() + bi * b_stride, gi[0].data() + bi * m * k,
                                  m, n, k);
                    }
                    // dB = A^T . dC
                    if (!gi[1].empty()) {
                      gemm_tn_acc(a.data().data() + bi * m * k, gp, gi[1].data() + bi * b_stride,
                                  m, k, n);
                    }
                  }
                }});
}

Tensor transpose(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.rank() != 2 && s.rank() != 3) {
    throw DimensionError("transpose: expected rank 2 or 3, got " + s.str());
  }
  const std::size_t batch = s.rank() == 3 ? s[0] : 1;
  const std::size_t r = s[s.rank() - 2];
  const std::size_t c = s.back();
  std::vector<float> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x[b * r * c + i * c + j];
    }
  }
  Shape shape = s.rank() == 3 ? Shape{batch, c, r} : Shape{c, r};
  return finish("transpose", std::move(shape), std::move(out), {x},
                {[batch, r, c](Span g, Grads gi) {
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t i = 0; i < r; ++i) {
                      for (std::size_t j = 0; j < c; ++j) {
                        gi[0][b * r * c + i * c + j] += g[b * r * c + j * r + i];
                      }
                    }
                  }
                }});
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape.numel() != x.numel()) {
    throw DimensionError("reshape: cannot view " + x.shape().str() + " as " + shape.str());
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return finish("reshape", std::move(shape), std::move(out), {x}, {[](Span g, Grads gi) {
                  for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i];
                }});
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = x.data().data() + r * n;
    float* o = out.data() + r * n;
    const float mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<float>(o[j] / total);
  }
  std::vector<float> y = out;
  return finish("softmax", x.shape(), std::move(out), {x},
                {[y = std::move(y), n, rows](Span g, Grads gi) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    const float* yr = y.data() + r * n;
                    const float* gr = g.data() + r * n;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(gr[j]) * yr[j];
                    for (std::size_t j = 0; j < n; ++j) {
                      gi[0][r * n + j] += yr[j] * static_cast<float>(gr[j] - dot);
                    }
                  }
                }});
}

namespace {
constexpr double kGeluA = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluB = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = static_cast<float>(0.5 * v * (1.0 + std::tanh(kGeluA * (v + kGeluB * v * v * v))));
  }
  return finish("gelu", x.shape(), std::move(out), {x}, {[x](Span g, Grads gi) {
                  for (std::size_t i = 0; i < gi[0].size(); ++i) {
                    const double v = x[i];
                    const double t = std::tanh(kGeluA * (v + kGeluB * v * v * v));
                    const double d =
                        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluA * (1.0 + 3.0 * kGeluB * v * v);
                    gi[0][i] += static_cast<float>(g[i] * d);
                  }
                }});
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return finish("relu", x.shape(), std::move(out), {x}, {[x](Span g, Grads gi) {
                  for (std::size_t i = 0; i < gi[0].size(); ++i) {
                    if (x[i] > 0.0f) gi[0][i] += g[i];
                  }
                }});
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require_channel_vector("layer_norm", x, gamma);
  require_channel_vector("layer_norm", x, beta);
  if (!(eps > 0.0f)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  std::vector<float> xhat(x.numel());
  std::vector<float> inv_std(rows);
  std::vector<float> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = x.data().data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += in[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(is);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (in[j] - mean) * is;
      xhat[r * c + j] = static_cast<float>(h);
      out[r * c + j] = static_cast<float>(gamma[j] * h + beta[j]);
    }
  }
  return finish("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                {[gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), c, rows](
                     Span g, Grads gi) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    const float* gr = g.data() + r * c;
                    const float* hr = xhat.data() + r * c;
                    if (!gi[0].empty()) {
                      double mean_d = 0.0;
                      double mean_dh = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double d = static_cast<double>(gr[j]) * gamma[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                      }
                      mean_d /= static_cast<double>(c);
                      mean_dh /= static_cast<double>(c);
                      for (std::size_t j = 0; j < c; ++j) {
                        const double d = static_cast<double>(gr[j]) * gamma[j];
                        gi[0][r * c + j] +=
                            static_cast<float>(inv_std[r] * (d - mean_d - hr[j] * mean_dh));
                      }
                    }
                    if (!gi[1].empty()) {
                      for (std::size_t j = 0; j < c; ++j) gi[1][j] += gr[j] * hr[j];
                    }
                    if (!gi[2].empty()) {
                      for (std::size_t j = 0; j < c; ++j) gi[2][j] += gr[j];
                    }
                  }
                }});
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              Padding padding) {
  const Shape& ks = kernel.shape();
  if (ks.rank() != 4 || ks[0] != ks[1]) {
    throw DimensionError("conv2d: kernel must be [k,k,Cin,Cout], got " + ks.str());
  }
  const ConvDims d = conv_dims("conv2d", x, ks[0], stride, padding);
  const std::size_t cin = d.channels;
  const std::size_t cout = ks[3];
  if (ks[2] != cin) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(ks[2]) +
                         " input channels, input has " + std::to_string(cin));
  }
  if (bias.shape().rank() != 1 || bias.numel() != cout) {
    throw DimensionError("conv2d: bias must be [" + std::to_string(cout) + "], got " +
                         bias.shape().str());
  }
  const std::size_t oh = d.gy.out;
  const std::size_t ow = d.gx.out;
  std::vector<double> acc(d.batch * oh * ow * cout);

  // Visits every (output pixel, kernel tap) pair that lands inside the input.
  auto for_each_tap = [d, oh, ow](auto&& fn) {
    for (std::size_t b = 0; b < d.batch; ++b) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::size_t opix = (b * oh + oy) * ow + ox;
          for (std::size_t ky = 0; ky < d.k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                      static_cast<std::ptrdiff_t>(d.gy.pad_before);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
            for (std::size_t kx = 0; kx < d.k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                        static_cast<std::ptrdiff_t>(d.gx.pad_before);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
              const std::size_t ipix = (b * d.in_h + static_cast<std::size_t>(iy)) * d.in_w +
                                       static_cast<std::size_t>(ix);
              fn(opix, ipix, ky * d.k + kx);
            }
          }
        }
      }
    }
  };

  for (std::size_t p = 0; p < d.batch * oh * ow; ++p) {
    std::copy(bias.data().begin(), bias.data().end(), acc.begin() + p * cout);
  }
  const float* xd = x.data().data();
  const float* kd = kernel.data().data();
  for_each_tap([&](std::size_t opix, std::size_t ipix, std::size_t tap) {
    gemm_acc(xd + ipix * cin, kd + tap * cin * cout, acc.data() + opix * cout, 1, cin, cout);
  });
  std::vector<float> out = narrow(acc);

  Shape shape{d.batch, oh, ow, cout};
  return finish("conv2d", std::move(shape), std::move(out), {x, kernel, bias},
                {[x, kernel, for_each_tap, cin, cout](Span g, Grads gi) {
                  const float* xd = x.data().data();
                  const float* kd = kernel.data().data();
                  for_each_tap([&](std::size_t opix, std::size_t ipix, std::size_t tap) {
                    const float* go = g.data() + opix * cout;
                    if (!gi[0].empty()) {
                      gemm_nt_acc(go, kd + tap * cin * cout, gi[0].data() + ipix * cin, 1, cout,
                                  cin);
                    }
                    if (!gi[1].empty()) {
                      gemm_tn_acc(xd + ipix * cin, go, gi[1].data() + tap * cin * cout, 1, cin,
                                  cout);
                    }
                  });
                  if (!gi[2].empty()) {
                    for (std::size_t i = 0; i < g.size(); ++i) gi[2][i % cout] += g[i];
                  }
                }});
}

Tensor conv2d_depthwise(const Tensor& x, const Tensor& kernel, std::size_t stride,
                        Padding padding) {
  const Shape& ks = kernel.shape();
  if (ks.rank() != 3 || ks[0] != ks[1]) {
    throw DimensionError("conv2d_depthwise: kernel must be [k,k,C], got " + ks.str());
  }
  const ConvDims d = conv_dims("conv2d_depthwise", x, ks[0], stride, padding);
  const std::size_t c = d.channels;
  if (ks[2] != c) {
    throw DimensionError("conv2d_depthwise: kernel has " + std::to_string(ks[2]) +
                         " channels, input has " + std::to_string(c));
  }
  const std::size_t oh = d.gy.out;
  const std::size_t ow = d.gx.out;
  std::vector<double> acc(d.batch * oh * ow * c, 0.0);

  auto for_each_tap = [d, oh, ow](auto&& fn) {
    for (std::size_t b = 0; b < d.batch; ++b) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::size_t opix = (b * oh + oy) * ow + ox;
          for (std::size_t ky = 0; ky < d.k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                                      static_cast<std::ptrdiff_t>(d.gy.pad_before);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
            for (std::size_t kx = 0; kx < d.k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                                        static_cast<std::ptrdiff_t>(d.gx.pad_before);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
              const std::size_t ipix = (b * d.in_h + static_cast<std::size_t>(iy)) * d.in_w +
                                       static_cast<std::size_t>(ix);
              fn(opix, ipix, ky * d.k + kx);
            }
          }
        }
      }
    }
  };

  const float* xd = x.data().data();
  const float* kd = kernel.data().data();
  for_each_tap([&](std::size_t opix, std::size_t ipix, std::size_t tap) {
    double* o = acc.data() + opix * c;
    const float* in = xd + ipix * c;
    const float* kt = kd + tap * c;
    for (std::size_t ch = 0; ch < c; ++ch) o[ch] += static_cast<double>(in[ch]) * kt[ch];
  });
  std::vector<float> out = narrow(acc);

  Shape shape{d.batch, oh, ow, c};
  return finish("conv2d_depthwise", std::move(shape), std::move(out), {x, kernel},
                {[x, kernel, for_each_tap, c](Span g, Grads gi) {
                  const float* xd = x.data().data();
                  const float* kd = kernel.data().data();
                  for_each_tap([&](std::size_t opix, std::size_t ipix, std::size_t tap) {
                    const float* go = g.data() + opix * c;
                    if (!gi[0].empty()) {
                      float* dx = gi[0].data() + ipix * c;
                      const float* kt = kd + tap * c;
                      for (std::size_t ch = 0; ch < c; ++ch) dx[ch] += go[ch] * kt[ch];
                    }
                    if (!gi[1].empty()) {
                      float* dk = gi[1].data() + tap * c;
                      const float* in = xd + ipix * c;
                      for (std::size_t ch = 0; ch < c; ++ch) dk[ch] += go[ch] * in[ch];
                    }
                  });
                }});
}

Tensor conv2d_pointwise(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  require_rank("conv2d_pointwise", x, 4);
  return dense(x, kernel, bias);
}

namespace {

Tensor dense_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
  const Shape& ws = w.shape();
  if (ws.rank() != 2 || ws[0] != x.shape().back()) {
    throw DimensionError("dense: weight " + ws.str() + " does not match input " +
                         x.shape().str());
  }
  const std::size_t cin = ws[0];
  const std::size_t cout = ws[1];
  if (bias != nullptr && (bias->shape().rank() != 1 || bias->numel() != cout)) {
    throw DimensionError("dense: bias must be [" + std::to_string(cout) + "], got " +
                         bias->shape().str());
  }
  const std::size_t rows = x.numel() / cin;
  std::vector<double> acc(rows * cout, 0.0);
  if (bias != nullptr) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(bias->data().begin(), bias->data().end(), acc.begin() + r * cout);
    }
  }
  gemm_acc(x.data().data(), w.data().data(), acc.data(), rows, cin, cout);
  std::vector<float> out = narrow(acc);

  std::vector<std::size_t> dims = x.shape().dims();
  dims.back() = cout;
  std::vector<Tensor> inputs{x, w};
  if (bias != nullptr) inputs.push_back(*bias);
  return finish("dense", Shape(std::move(dims)), std::move(out), std::move(inputs),
                {[x, w, rows, cin, cout](Span g, Grads gi) {
                  if (!gi[0].empty()) {
                    gemm_nt_acc(g.data(), w.data().data(), gi[0].data(), rows, cout, cin);
                  }
                  if (!gi[1].empty()) {
                    gemm_tn_acc(x.data().data(), g.data(), gi[1].data(), rows, cin, cout);
                  }
                  if (gi.size() > 2 && !gi[2].empty()) {
                    for (std::size_t i = 0; i < g.size(); ++i) gi[2][i % cout] += g[i];
                  }
                }});
}

}  // namespace

Tensor dense(const Tensor& x, const Tensor& w) { return dense_impl(x, w, nullptr); }

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias) {
  return dense_impl(x, w, &bias);
}

Tensor spatial_mean(const Tensor& x) {
  require_rank("spatial_mean", x, 4);
  const Shape& s = x.shape();
  const std::size_t batch = s[0];
  const std::size_t hw = s[1] * s[2];
  const std::size_t c = s[3];
  std::vector<double> acc(batch * c, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      const float* in = x.data().data() + (b * hw + p) * c;
      for (std::size_t ch = 0; ch < c; ++ch) acc[b * c + ch] += in[ch];
    }
  }
  std::vector<float> out(batch * c);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(acc[i] / static_cast<double>(hw));
  }
  return finish("spatial_mean", Shape{batch, c}, std::move(out), {x},
                {[batch, hw, c](Span g, Grads gi) {
                  const float inv = 1.0f / static_cast<float>(hw);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t p = 0; p < hw; ++p) {
                      float* dx = gi[0].data() + (b * hw + p) * c;
                      for (std::size_t ch = 0; ch < c; ++ch) dx[ch] += g[b * c + ch] * inv;
                    }
                  }
                }});
}

Tensor spatial_dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("spatial_dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  require_rank("spatial_dropout", x, 4);
  if (!training) return x;
  const Shape& s = x.shape();
  const std::size_t batch = s[0];
  const std::size_t hw = s[1] * s[2];
  const std::size_t c = s[3];
  const float keep_scale = static_cast<float>(1.0 / (1.0 - p));
  std::vector<float> mask(batch * c);
  for (float& m : mask) m = rng.uniform() < p ? 0.0f : keep_scale;

  std::vector<float> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < hw; ++q) {
      const std::size_t base = (b * hw + q) * c;
      for (std::size_t ch = 0; ch < c; ++ch) out[base + ch] = x[base + ch] * mask[b * c + ch];
    }
  }
  return finish("spatial_dropout", s, std::move(out), {x},
                {[mask = std::move(mask), batch, hw, c](Span g, Grads gi) {
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t q = 0; q < hw; ++q) {
                      const std::size_t base = (b * hw + q) * c;
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        gi[0][base + ch] += g[base + ch] * mask[b * c + ch];
                      }
                    }
                  }
                }});
}

}  // namespace convcut::ops
