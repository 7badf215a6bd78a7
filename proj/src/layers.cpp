#include "convcut/layers.hpp"

#include <cmath>

#include "convcut/error.hpp"

namespace convcut {

namespace {

constexpr double kInitStd = 0.02;

// Rethrows shape errors with the failing layer's name in front.
template <typename Fn>
Tensor named_step(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const DimensionError& e) {
    throw DimensionError(name + ": " + e.what());
  }
}

}  // namespace

Tensor init_kernel(Shape shape, Rng& rng) {
  std::vector<float> data(shape.numel());
  for (float& v : data) v = static_cast<float>(rng.truncated_normal(kInitStd));
  return Tensor(std::move(shape), std::move(data), true);
}

Tensor init_zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }

Tensor init_ones(Shape shape) { return Tensor::full(std::move(shape), 1.0f, true); }

const Tensor* ActivationTrace::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e.value;
  }
  return nullptr;
}

LayerNorm LayerNorm::create(std::size_t channels) {
  return {init_ones(Shape{channels}), init_zeros(Shape{channels})};
}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, eps); }

void LayerNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + "gamma", gamma});
  out.push_back({prefix + "beta", beta});
}

SeparableConv2d SeparableConv2d::create(std::size_t cin, std::size_t cout, std::size_t kernel,
                                        std::size_t stride, ops::Padding padding, Rng& rng) {
  SeparableConv2d layer;
  layer.depthwise = init_kernel(Shape{kernel, kernel, cin}, rng);
  layer.pointwise = init_kernel(Shape{cin, cout}, rng);
  layer.bias = init_zeros(Shape{cout});
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

Tensor SeparableConv2d::forward(const Tensor& x) const {
  return ops::conv2d_pointwise(ops::conv2d_depthwise(x, depthwise, stride, padding), pointwise,
                               bias);
}

void SeparableConv2d::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + "depthwise", depthwise});
  out.push_back({prefix + "pointwise", pointwise});
  out.push_back({prefix + "bias", bias});
}

ConvNeXtBlock ConvNeXtBlock::create(std::size_t channels, Rng& rng) {
  ConvNeXtBlock b;
  b.dw_kernel = init_kernel(Shape{kKernel, kKernel, channels}, rng);
  b.dw_bias = init_zeros(Shape{channels});
  b.norm = LayerNorm::create(channels);
  b.expand_w = init_kernel(Shape{channels, kExpansion * channels}, rng);
  b.expand_b = init_zeros(Shape{kExpansion * channels});
  b.project_w = init_kernel(Shape{kExpansion * channels, channels}, rng);
  b.project_b = init_zeros(Shape{channels});
  b.layer_scale = Tensor::full(Shape{channels}, kLayerScaleInit, true);
  return b;
}

Tensor ConvNeXtBlock::forward(const Tensor& x) const {
  if (x.shape().rank() != 4 || x.shape()[3] != channels()) {
    throw DimensionError("convnext block expects " + std::to_string(channels()) +
                         " channels, got " + x.shape().str());
  }
  Tensor h = ops::add_channel(ops::conv2d_depthwise(x, dw_kernel, 1, ops::Padding::kSame), dw_bias);
  h = norm.forward(h);
  h = ops::gelu(ops::conv2d_pointwise(h, expand_w, expand_b));
  h = ops::conv2d_pointwise(h, project_w, project_b);
  return ops::add(x, ops::mul_channel(h, layer_scale));
}

void ConvNeXtBlock::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + "dw.kernel", dw_kernel});
  out.push_back({prefix + "dw.bias", dw_bias});
  norm.collect(prefix + "norm.", out);
  out.push_back({prefix + "expand.weight", expand_w});
  out.push_back({prefix + "expand.bias", expand_b});
  out.push_back({prefix + "project.weight", project_w});
  out.push_back({prefix + "project.bias", project_b});
  out.push_back({prefix + "layer_scale", layer_scale});
}

Stem Stem::create(std::size_t in_channels, std::size_t channels, Rng& rng) {
  return {init_kernel(Shape{kPatch, kPatch, in_channels, channels}, rng),
          init_zeros(Shape{channels}), LayerNorm::create(channels)};
}

Tensor Stem::forward(const Tensor& x) const {
  const Shape& s = x.shape();
  if (s.rank() != 4 || s[1] % kPatch != 0 || s[2] % kPatch != 0) {
    throw DimensionError("stem needs [B,H,W,C] with H and W divisible by 4, got " + s.str());
  }
  return norm.forward(ops::conv2d(x, kernel, bias, kPatch, ops::Padding::kValid));
}

void Stem::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + "kernel", kernel});
  out.push_back({prefix + "bias", bias});
  norm.collect(prefix + "norm.", out);
}

Downsample Downsample::create(std::size_t cin, std::size_t cout, Rng& rng) {
  return {LayerNorm::create(cin), init_kernel(Shape{2, 2, cin, cout}, rng),
          init_zeros(Shape{cout})};
}

Tensor Downsample::forward(const Tensor& x) const {
  const Shape& s = x.shape();
  if (s.rank() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0) {
    throw DimensionError("downsample needs even spatial dims, got " + s.str());
  }
  return ops::conv2d(norm.forward(x), kernel, bias, 2, ops::Padding::kValid);
}

void Downsample::collect(const std::string& prefix, ParameterList& out) const {
  norm.collect(prefix + "norm.", out);
  out.push_back({prefix + "kernel", kernel});
  out.push_back({prefix + "bias", bias});
}

SelfAttentionHead SelfAttentionHead::create(std::size_t d_in, std::size_t d_q, Rng& rng) {
  return {init_kernel(Shape{d_in, d_q}, rng), init_kernel(Shape{d_in, d_q}, rng),
          init_kernel(Shape{d_in, d_q}, rng)};
}

Tensor SelfAttentionHead::attention_weights(const Tensor& tokens) const {
  if (tokens.shape().rank() < 2 || tokens.shape().back() != d_in()) {
    throw DimensionError("self-attention expects token width " + std::to_string(d_in()) +
                         ", got " + tokens.shape().str());
  }
  const Tensor q = ops::dense(tokens, w_q);
  const Tensor k = ops::dense(tokens, w_k);
  const float inv_sqrt = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d_q())));
  return ops::softmax(ops::scale(ops::matmul(q, ops::transpose(k)), inv_sqrt));
}

Tensor SelfAttentionHead::forward(const Tensor& tokens) const {
  const Tensor weights = attention_weights(tokens);
  return ops::matmul(weights, ops::dense(tokens, w_v));
}

void SelfAttentionHead::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + "w_q", w_q});
  out.push_back({prefix + "w_k", w_k});
  out.push_back({prefix + "w_v", w_v});
}

Tensor attend_pooled(const SelfAttentionHead& head, const Tensor& pooled, std::size_t token_dim,
                     ActivationTrace* trace, const std::string& prefix) {
  const Shape& s = pooled.shape();
  if (s.rank() != 2 || token_dim == 0 || s[1] % token_dim != 0) {
    throw DimensionError(prefix + "tokens: pooled width " + s.str() +
                         " is not divisible by token_dim " + std::to_string(token_dim));
  }
  const std::size_t batch = s[0];
  const std::size_t tokens = s[1] / token_dim;
  const Tensor t = ops::reshape(pooled, Shape{batch, tokens, token_dim});
  if (trace) trace->add(prefix + "tokens", t);
  const Tensor attended =
      named_step(prefix + "attention", [&] { return head.forward(t); });
  if (trace) trace->add(prefix + "attention", attended);
  return ops::reshape(attended, Shape{batch, tokens * head.d_q()});
}

DetailExtractionBlock DetailExtractionBlock::create(const DetailExtractionConfig& cfg, Rng& rng) {
  if (cfg.conv_layers < 1 || cfg.conv_layers > 3) {
    throw ConfigError("detail extraction conv_layers must be 1, 2, or 3");
  }
  if (cfg.attention && (cfg.token_dim == 0 || cfg.channels % cfg.token_dim != 0)) {
    throw ConfigError("detail extraction channels " + std::to_string(cfg.channels) +
                      " not divisible by token_dim " + std::to_string(cfg.token_dim));
  }
  DetailExtractionBlock block;
  block.config = cfg;
  block.norm = LayerNorm::create(cfg.channels);
  const std::size_t c = cfg.channels;
  block.convs.push_back(SeparableConv2d::create(c, c, 4, 4, ops::Padding::kValid, rng));
  if (cfg.conv_layers >= 2) {
    block.convs.push_back(SeparableConv2d::create(c, c, 2, 2, ops::Padding::kValid, rng));
  }
  if (cfg.conv_layers >= 3) {
    block.convs.push_back(SeparableConv2d::create(c, c, 3, 1, ops::Padding::kSame, rng));
  }
  if (cfg.attention) block.attention = SelfAttentionHead::create(cfg.token_dim, cfg.d_q, rng);
  return block;
}

std::size_t DetailExtractionBlock::feature_size() const {
  if (!attention) return config.channels;
  return config.channels / config.token_dim * config.d_q;
}

Tensor DetailExtractionBlock::forward(const Tensor& x, bool training, Rng& rng,
                                      ActivationTrace* trace) const {
  Tensor y = named_step("det.norm", [&] { return norm.forward(x); });
  if (trace) trace->add("det.norm", y);
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const std::string name = "det.conv." + std::to_string(i);
    y = named_step(name, [&] { return convs[i].forward(y); });
    if (trace) trace->add(name, y);
  }
  y = ops::spatial_dropout(y, config.dropout_p, training, rng);
  y = ops::spatial_mean(y);
  if (trace) trace->add("det.pool", y);
  if (!attention) return y;
  return attend_pooled(*attention, y, config.token_dim, trace, "det.");
}

void DetailExtractionBlock::collect(const std::string& prefix, ParameterList& out) const {
  norm.collect(prefix + "norm.", out);
  for (std::size_t i = 0; i < convs.size(); ++i) {
    convs[i].collect(prefix + "conv." + std::to_string(i) + ".", out);
  }
  if (attention) attention->collect(prefix + "attention.", out);
}

}  // namespace convcut
