#pragma once

#include <cstddef>

#include "convcut/rng.hpp"
#include "convcut/tensor.hpp"

// Differentiable operations. Every op validates shapes (DimensionError),
// rejects non-finite results (NumericError), and records itself on the
// current tape when an input is tracked.
namespace convcut::ops {

enum class Padding { kValid, kSame };

// Output extent and leading pad for one spatial axis. "same" pads with zeros,
// putting the odd extra row/column at the bottom/right.
struct AxisGeometry {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};
AxisGeometry conv_axis(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);

// Broadcast a [C] vector over the last axis.
Tensor add_channel(const Tensor& x, const Tensor& v);
Tensor mul_channel(const Tensor& x, const Tensor& v);

// Sum of all elements as a [1] tensor (accumulated in double).
Tensor sum(const Tensor& x);

// [M,K]x[K,N], [B,M,K]x[B,K,N], or [B,M,K]x[K,N].
Tensor matmul(const Tensor& a, const Tensor& b);

// Swap the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& x);

// x * Phi(x) with the tanh approximation.
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

// Normalizes over the last axis, then applies gamma and beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

// Dense conv on [B,H,W,Cin] with kernel [k,k,Cin,Cout] and bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              Padding padding);

// Per-channel conv on [B,H,W,C] with kernel [k,k,C].
Tensor conv2d_depthwise(const Tensor& x, const Tensor& kernel, std::size_t stride,
                        Padding padding);

// 1x1 conv on [B,H,W,Cin] with kernel [Cin,Cout] and bias [Cout].
Tensor conv2d_pointwise(const Tensor& x, const Tensor& kernel, const Tensor& bias);

// x[..., Cin] . w[Cin, Cout] (+ bias[Cout]) over the last axis of any rank.
Tensor dense(const Tensor& x, const Tensor& w);
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias);

// [B,H,W,C] -> [B,C], arithmetic mean over H and W.
Tensor spatial_mean(const Tensor& x);

// Zeroes whole (batch, channel) planes with probability p and scales the
// survivors by 1/(1-p). Returns x unchanged when training is false.
Tensor spatial_dropout(const Tensor& x, double p, bool training, Rng& rng);

}  // namespace convcut::ops
