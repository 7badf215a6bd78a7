#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "convcut/layers.hpp"
#include "convcut/rng.hpp"
#include "convcut/tensor.hpp"

namespace convcut {

struct ConvCutConfig {
  std::size_t retained_stages = 2;
  std::vector<std::size_t> stage_widths{128, 256, 512, 1024};
  std::vector<std::size_t> stage_depths{3, 3, 27, 3};
  std::size_t in_channels = 3;
  std::size_t num_classes = 7;
  double dropout_p = 0.1;
  std::size_t token_dim = 16;
  std::size_t d_q = 16;
  bool freeze_backbone = false;
  bool enable_attention = true;
  bool enable_detail_extraction = true;
  std::size_t det_conv_layers = 2;

  // ConvNeXt-Base widths and depths, two retained stages.
  static ConvCutConfig base();
  // Desk-scale profile: widths 16/32, one block per stage, 8-wide tokens.
  static ConvCutConfig tiny();

  // Human-readable description of every violated constraint; empty if valid.
  std::vector<std::string> violations() const;

  friend bool operator==(const ConvCutConfig&, const ConvCutConfig&) = default;
};

struct BackboneStage {
  std::optional<Downsample> downsample;  // absent for the first stage
  std::vector<ConvNeXtBlock> blocks;
};

// Truncated ConvNeXt backbone, optional detail-extraction block, linear head.
class ConvCutModel {
 public:
  // Throws ConfigError listing every violation. Deterministic given rng.
  static ConvCutModel build(const ConvCutConfig& cfg, Rng& rng);

  const ConvCutConfig& config() const { return config_; }

  // x: [B,H,W,in_channels] -> logits [B,num_classes]. Shape failures raise
  // DimensionError prefixed with the failing layer's name.
  Tensor forward(const Tensor& x, bool training, Rng& rng, ActivationTrace* trace = nullptr) const;
  Tensor forward_eval(const Tensor& x, ActivationTrace* trace = nullptr) const;

  // Backbone output features before the detail/attention/head path.
  Tensor backbone_forward(const Tensor& x, ActivationTrace* trace = nullptr) const;

  ParameterList parameters() const;
  ParameterList trainable_parameters() const;
  std::size_t parameter_count() const;
  std::size_t feature_size() const;

  // Stem and stage parameters leave (or rejoin) the trainable set.
  void set_backbone_frozen(bool frozen);
  const std::set<std::string>& frozen() const { return frozen_; }
  static bool is_backbone_parameter(const std::string& name);

  // Name of the last retained stage's output, the default Grad-CAM target.
  std::string default_cam_layer() const;

  const Stem& stem() const { return stem_; }
  const std::vector<BackboneStage>& stages() const { return stages_; }
  const std::optional<DetailExtractionBlock>& detail_extraction() const { return det_; }

 private:
  ConvCutConfig config_;
  Stem stem_;
  std::vector<BackboneStage> stages_;
  std::optional<DetailExtractionBlock> det_;
  // Used when attention is enabled without detail extraction.
  std::optional<SelfAttentionHead> pooled_attention_;
  Tensor head_w_;
  Tensor head_b_;
  std::set<std::string> frozen_;
};

// ReLU(sum_c alpha_c * A_c) with alpha_c the spatial mean of
// d logit[class_idx] / dA, scaled so the maximum is 1. x must be [1,H,W,C].
// An empty target_layer selects default_cam_layer(). Unknown layers raise
// LookupError.
Tensor grad_cam(const ConvCutModel& model, const Tensor& x, std::size_t class_idx,
                const std::string& target_layer = {});

}  // namespace convcut
