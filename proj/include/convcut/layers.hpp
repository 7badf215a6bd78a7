#pragma once

#include <optional>
#include <string>
#include <vector>

#include "convcut/ops.hpp"
#include "convcut/rng.hpp"
#include "convcut/tensor.hpp"

namespace convcut {

struct NamedTensor {
  std::string name;
  Tensor value;
};
using ParameterList = std::vector<NamedTensor>;

// Parameter initializers. All return requires_grad leaves.
Tensor init_kernel(Shape shape, Rng& rng);  // truncated normal, std 0.02
Tensor init_zeros(Shape shape);
Tensor init_ones(Shape shape);

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  float eps = 1e-6f;

  static LayerNorm create(std::size_t channels);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

struct SeparableConv2d {
  Tensor depthwise;  // [k,k,Cin]
  Tensor pointwise;  // [Cin,Cout]
  Tensor bias;       // [Cout]
  std::size_t stride = 1;
  ops::Padding padding = ops::Padding::kValid;

  static SeparableConv2d create(std::size_t cin, std::size_t cout, std::size_t kernel,
                                std::size_t stride, ops::Padding padding, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Residual ConvNeXt unit: x + scale * project(gelu(expand(norm(dw7(x))))).
struct ConvNeXtBlock {
  Tensor dw_kernel;  // [7,7,C]
  Tensor dw_bias;    // [C]
  LayerNorm norm;
  Tensor expand_w;   // [C,4C]
  Tensor expand_b;
  Tensor project_w;  // [4C,C]
  Tensor project_b;
  Tensor layer_scale;  // [C]

  static constexpr std::size_t kKernel = 7;
  static constexpr std::size_t kExpansion = 4;
  static constexpr float kLayerScaleInit = 1e-6f;

  static ConvNeXtBlock create(std::size_t channels, Rng& rng);
  std::size_t channels() const { return layer_scale.numel(); }
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

// 4x4 stride-4 patchify conv followed by layer norm.
struct Stem {
  Tensor kernel;  // [4,4,Cin,C]
  Tensor bias;
  LayerNorm norm;

  static constexpr std::size_t kPatch = 4;

  static Stem create(std::size_t in_channels, std::size_t channels, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Layer norm then 2x2 stride-2 conv.
struct Downsample {
  LayerNorm norm;
  Tensor kernel;  // [2,2,Cin,Cout]
  Tensor bias;

  static Downsample create(std::size_t cin, std::size_t cout, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

// Single-head scaled dot-product self-attention with learned projections.
struct SelfAttentionHead {
  Tensor w_q;  // [d_in, d_q]
  Tensor w_k;
  Tensor w_v;

  static SelfAttentionHead create(std::size_t d_in, std::size_t d_q, Rng& rng);
  std::size_t d_in() const { return w_q.shape()[0]; }
  std::size_t d_q() const { return w_q.shape()[1]; }

  // tokens: [T, d_in] or [B, T, d_in]. Returns [.., T, d_q].
  Tensor forward(const Tensor& tokens) const;
  // Row-stochastic [.., T, T] weights used by forward.
  Tensor attention_weights(const Tensor& tokens) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

struct DetailExtractionConfig {
  std::size_t channels = 256;
  std::size_t conv_layers = 2;  // 1, 2, or 3
  double dropout_p = 0.1;
  bool attention = true;
  std::size_t token_dim = 16;
  std::size_t d_q = 16;
};

// Named intermediate activations, filled by forward passes when requested.
struct ActivationTrace {
  std::vector<NamedTensor> entries;
  void add(std::string name, const Tensor& t) { entries.push_back({std::move(name), t}); }
  const Tensor* find(const std::string& name) const;
};

// Splits the pooled [B,C] vector into C/token_dim tokens, attends, and
// flattens back to [B, T*d_q].
Tensor attend_pooled(const SelfAttentionHead& head, const Tensor& pooled, std::size_t token_dim,
                     ActivationTrace* trace, const std::string& prefix);

// layer norm -> separable convs -> spatial dropout -> spatial mean ->
// token attention -> flat feature.
struct DetailExtractionBlock {
  DetailExtractionConfig config;
  LayerNorm norm;
  std::vector<SeparableConv2d> convs;
  std::optional<SelfAttentionHead> attention;

  static DetailExtractionBlock create(const DetailExtractionConfig& cfg, Rng& rng);
  std::size_t feature_size() const;
  Tensor forward(const Tensor& x, bool training, Rng& rng, ActivationTrace* trace = nullptr) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

}  // namespace convcut
