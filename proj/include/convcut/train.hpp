#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "convcut/data.hpp"
#include "convcut/layers.hpp"
#include "convcut/model.hpp"
#include "convcut/rng.hpp"
#include "convcut/tensor.hpp"

namespace convcut {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 50;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
  double hflip_prob = 0.5;

  std::vector<std::string> violations() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
// Labels outside [0, K) raise DataError naming the sample index.
Tensor sparse_ce_loss(const Tensor& logits, std::span<const std::size_t> labels);

struct AdamState {
  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
  };
  std::map<std::string, Moments> moments;
  std::uint64_t step = 0;
};

// Bias-corrected Adam update, in place. Parameters without a gradient in
// `grads` are skipped.
void adam_step(std::span<NamedTensor> params, const GradMap& grads, AdamState& state,
               const TrainConfig& cfg);

// Mirrors each batch element along the width axis with probability prob.
// One uniform draw per element regardless of prob.
Tensor random_hflip(const Tensor& x, double prob, Rng& rng);

struct EpochStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

// Shuffles, augments, and takes one Adam step per batch (last partial batch
// included). Errors are rethrown with the batch index.
EpochStats train_epoch(ConvCutModel& model, const LabeledDataset& ds, const TrainConfig& cfg,
                       AdamState& state, Rng& rng);

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // rows true, cols predicted

  std::size_t total() const;
  // Accuracy and macro F1 (zero-support classes score 0) from counts.
  static Metrics from_confusion(std::vector<std::vector<std::size_t>> confusion);
};

// Index of the largest entry; lowest index wins ties.
std::size_t argmax(std::span<const float> values);

// Confusion counts for predicted vs true labels over num_classes.
Metrics score_predictions(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                          std::size_t num_classes);

Metrics evaluate(const ConvCutModel& model, const LabeledDataset& ds, std::size_t batch_size = 16);

using EpochCallback = std::function<void(std::size_t epoch, const EpochStats&)>;

// Full loop: epochs of train_epoch, appending "epoch,loss,train_acc" rows to
// metrics_csv when it is non-empty (the file is truncated first).
std::vector<EpochStats> fit(ConvCutModel& model, const LabeledDataset& ds, const TrainConfig& cfg,
                            const std::filesystem::path& metrics_csv = {},
                            const EpochCallback& on_epoch = {});

}  // namespace convcut
