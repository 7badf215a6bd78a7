#include "convcut/model.hpp"

#include <algorithm>

#include "convcut/error.hpp"

namespace convcut {

namespace {

template <typename Fn>
Tensor named_step(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const DimensionError& e) {
    throw DimensionError(name + ": " + e.what());
  }
}

}  // namespace

ConvCutConfig ConvCutConfig::base() { return ConvCutConfig{}; }

ConvCutConfig ConvCutConfig::tiny() {
  ConvCutConfig cfg;
  cfg.stage_widths = {16, 32};
  cfg.stage_depths = {1, 1};
  cfg.token_dim = 8;
  cfg.d_q = 8;
  cfg.num_classes = 2;
  return cfg;
}

std::vector<std::string> ConvCutConfig::violations() const {
  std::vector<std::string> v;
  if (retained_stages < 1 || retained_stages > 3) v.push_back("retained_stages must be 1, 2, or 3");
  if (stage_widths.size() != stage_depths.size()) {
    v.push_back("stage_widths and stage_depths must have equal length");
  }
  if (retained_stages > stage_widths.size()) {
    v.push_back("retained_stages exceeds the number of configured stages");
  }
  for (std::size_t w : stage_widths) {
    if (w == 0) v.push_back("stage widths must be positive");
  }
  if (in_channels == 0) v.push_back("in_channels must be positive");
  if (num_classes < 2) v.push_back("num_classes must be >= 2");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) v.push_back("dropout_p must be in [0, 1)");
  if (det_conv_layers < 1 || det_conv_layers > 3) v.push_back("det_conv_layers must be 1, 2, or 3");
  if (enable_attention) {
    if (token_dim == 0) v.push_back("token_dim must be positive");
    if (d_q == 0) v.push_back("d_q must be positive");
    const std::size_t last = std::min(retained_stages, stage_widths.size());
    if (token_dim > 0 && last > 0 && stage_widths[last - 1] % token_dim != 0) {
      v.push_back("token_dim must divide the last retained stage width");
    }
  }
  return v;
}

ConvCutModel ConvCutModel::build(const ConvCutConfig& cfg, Rng& rng) {
  const auto problems = cfg.violations();
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }

  ConvCutModel m;
  m.config_ = cfg;
  m.stem_ = Stem::create(cfg.in_channels, cfg.stage_widths[0], rng);
  for (std::size_t s = 0; s < cfg.retained_stages; ++s) {
    BackboneStage stage;
    if (s > 0) stage.downsample = Downsample::create(cfg.stage_widths[s - 1], cfg.stage_widths[s], rng);
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
      stage.blocks.push_back(ConvNeXtBlock::create(cfg.stage_widths[s], rng));
    }
    m.stages_.push_back(std::move(stage));
  }

  const std::size_t width = cfg.stage_widths[cfg.retained_stages - 1];
  std::size_t features = width;
  if (cfg.enable_detail_extraction) {
    DetailExtractionConfig dcfg;
    dcfg.channels = width;
    dcfg.conv_layers = cfg.det_conv_layers;
    dcfg.dropout_p = cfg.dropout_p;
    dcfg.attention = cfg.enable_attention;
    dcfg.token_dim = cfg.token_dim;
    dcfg.d_q = cfg.d_q;
    m.det_ = DetailExtractionBlock::create(dcfg, rng);
    features = m.det_->feature_size();
  } else if (cfg.enable_attention) {
    m.pooled_attention_ = SelfAttentionHead::create(cfg.token_dim, cfg.d_q, rng);
    features = width / cfg.token_dim * cfg.d_q;
  }
  m.head_w_ = init_kernel(Shape{features, cfg.num_classes}, rng);
  m.head_b_ = init_zeros(Shape{cfg.num_classes});
  m.set_backbone_frozen(cfg.freeze_backbone);
  return m;
}

Tensor ConvCutModel::backbone_forward(const Tensor& x, ActivationTrace* trace) const {
  Tensor y = named_step("stem", [&] { return stem_.forward(x); });
  if (trace) trace->add("stem", y);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string prefix = "stage." + std::to_string(s);
    if (stages_[s].downsample) {
      y = named_step(prefix + ".downsample", [&] { return stages_[s].downsample->forward(y); });
    }
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      y = named_step(prefix + ".block." + std::to_string(b),
                     [&] { return stages_[s].blocks[b].forward(y); });
    }
    if (trace) trace->add(prefix, y);
  }
  return y;
}

Tensor ConvCutModel::forward(const Tensor& x, bool training, Rng& rng,
                             ActivationTrace* trace) const {
  if (x.shape().rank() != 4 || x.shape()[3] != config_.in_channels) {
    throw DimensionError("input: expected [B,H,W," + std::to_string(config_.in_channels) +
                         "], got " + x.shape().str());
  }
  const Tensor backbone = backbone_forward(x, trace);
  Tensor features;
  if (det_) {
    features = det_->forward(backbone, training, rng, trace);
  } else {
    features = ops::spatial_mean(backbone);
    if (trace) trace->add("pool", features);
    if (pooled_attention_) {
      features = attend_pooled(*pooled_attention_, features, config_.token_dim, trace, "");
    }
  }
  if (trace) trace->add("features", features);
  Tensor logits = named_step("head", [&] { return ops::dense(features, head_w_, head_b_); });
  if (trace) trace->add("logits", logits);
  return logits;
}

Tensor ConvCutModel::forward_eval(const Tensor& x, ActivationTrace* trace) const {
  Rng unused(0);
  return forward(x, false, unused, trace);
}

ParameterList ConvCutModel::parameters() const {
  ParameterList out;
  stem_.collect("stem.", out);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string prefix = "stage." + std::to_string(s) + ".";
    if (stages_[s].downsample) stages_[s].downsample->collect(prefix + "downsample.", out);
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      stages_[s].blocks[b].collect(prefix + "block." + std::to_string(b) + ".", out);
    }
  }
  if (det_) det_->collect("det.", out);
  if (pooled_attention_) pooled_attention_->collect("attention.", out);
  out.push_back({"head.weight", head_w_});
  out.push_back({"head.bias", head_b_});
  return out;
}

ParameterList ConvCutModel::trainable_parameters() const {
  ParameterList all = parameters();
  std::erase_if(all, [this](const NamedTensor& p) { return frozen_.contains(p.name); });
  return all;
}

std::size_t ConvCutModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value.numel();
  return n;
}

std::size_t ConvCutModel::feature_size() const { return head_w_.shape()[0]; }

bool ConvCutModel::is_backbone_parameter(const std::string& name) {
  return name.starts_with("stem.") || name.starts_with("stage.");
}

void ConvCutModel::set_backbone_frozen(bool frozen) {
  frozen_.clear();
  config_.freeze_backbone = frozen;
  if (!frozen) return;
  for (const auto& p : parameters()) {
    if (is_backbone_parameter(p.name)) frozen_.insert(p.name);
  }
}

std::string ConvCutModel::default_cam_layer() const {
  return "stage." + std::to_string(stages_.size() - 1);
}

Tensor grad_cam(const ConvCutModel& model, const Tensor& x, std::size_t class_idx,
                const std::string& target_layer) {
  if (x.shape().rank() != 4 || x.shape()[0] != 1) {
    throw DimensionError("grad_cam: expected a single image [1,H,W,C], got " + x.shape().str());
  }
  const std::size_t classes = model.config().num_classes;
  if (class_idx >= classes) {
    throw ConfigError("grad_cam: class index " + std::to_string(class_idx) + " out of range for " +
                      std::to_string(classes) + " classes");
  }
  const std::string layer = target_layer.empty() ? model.default_cam_layer() : target_layer;

  GradTape tape;
  ActivationTrace trace;
  Tensor logits;
  {
    TapeScope scope(tape);
    logits = model.forward_eval(x, &trace);
  }
  const Tensor* activation = trace.find(layer);
  if (activation == nullptr || activation->shape().rank() != 4) {
    throw LookupError("grad_cam: no 4-D activation named '" + layer + "'");
  }

  std::vector<float> onehot(classes, 0.0f);
  onehot[class_idx] = 1.0f;
  Tensor target;
  {
    TapeScope scope(tape);
    target = ops::sum(ops::mul(logits, Tensor(logits.shape(), onehot)));
  }
  const GradMap grads = backward(target, tape);

  const Shape& as = activation->shape();
  const std::size_t h = as[1];
  const std::size_t w = as[2];
  const std::size_t c = as[3];
  std::vector<double> alpha(c, 0.0);
  if (const Tensor* g = grads.find(*activation)) {
    for (std::size_t p = 0; p < h * w; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) alpha[ch] += (*g)[p * c + ch];
    }
    for (double& a : alpha) a /= static_cast<double>(h * w);
  }

  std::vector<float> heat(h * w, 0.0f);
  for (std::size_t p = 0; p < h * w; ++p) {
    double v = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) v += alpha[ch] * (*activation)[p * c + ch];
    heat[p] = v > 0.0 ? static_cast<float>(v) : 0.0f;
  }
  const float peak = *std::max_element(heat.begin(), heat.end());
  if (peak > 0.0f) {
    for (float& v : heat) v /= peak;
  }
  return Tensor(Shape{h, w}, std::move(heat));
}

}  // namespace convcut
