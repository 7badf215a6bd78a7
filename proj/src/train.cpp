#include "convcut/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "convcut/error.hpp"

namespace convcut {

namespace {

constexpr std::uint64_t kTrainStream = 2;

template <typename Fn>
auto with_batch_context(std::size_t batch, Fn&& fn) {
  const std::string ctx = "batch " + std::to_string(batch) + ": ";
  try {
    return fn();
  } catch (const DimensionError& e) {
    throw DimensionError(ctx + e.what());
  } catch (const NumericError& e) {
    throw NumericError(ctx + e.what());
  } catch (const DataError& e) {
    throw DataError(ctx + e.what());
  }
}

}  // namespace

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> v;
  if (batch_size < 1) v.push_back("batch_size must be >= 1");
  if (epochs < 1) v.push_back("epochs must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    v.push_back("learning_rate must be finite and >= 0");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) v.push_back("adam_beta1 must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) v.push_back("adam_beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) v.push_back("adam_eps must be positive");
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) v.push_back("hflip_prob must be in [0, 1]");
  return v;
}

Tensor sparse_ce_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  const Shape& s = logits.shape();
  if (s.rank() != 2) throw DimensionError("sparse_ce_loss: logits must be [B,K], got " + s.str());
  const std::size_t batch = s[0];
  const std::size_t k = s[1];
  if (labels.size() != batch) {
    throw DimensionError("sparse_ce_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= k) {
      throw DataError("sparse_ce_loss: sample " + std::to_string(b) + " has label " +
                      std::to_string(labels[b]) + " outside [0, " + std::to_string(k) + ")");
    }
  }

  std::vector<float> probs(batch * k);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const float* row = logits.data().data() + b * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[labels[b]];
    for (std::size_t j = 0; j < k; ++j) probs[b * k + j] = static_cast<float>(std::exp(row[j] - lse));
  }
  const float loss = static_cast<float>(total / static_cast<double>(batch));
  if (!std::isfinite(loss)) throw NumericError("sparse_ce_loss: non-finite loss");

  std::vector<std::size_t> y(labels.begin(), labels.end());
  return record_op(
      "sparse_ce_loss", Shape{1}, {loss}, {logits},
      {[probs = std::move(probs), y = std::move(y), batch, k](std::span<const float> g,
                                                               std::span<std::span<float>> gi) {
        const float scale = g[0] / static_cast<float>(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < k; ++j) {
            const float target = j == y[b] ? 1.0f : 0.0f;
            gi[0][b * k + j] += scale * (probs[b * k + j] - target);
          }
        }
      }});
}

void adam_step(std::span<NamedTensor> params, const GradMap& grads, AdamState& state,
               const TrainConfig& cfg) {
  // Validate everything before touching any parameter.
  for (const auto& p : params) {
    const Tensor* g = grads.find(p.value);
    if (g != nullptr && g->shape() != p.value.shape()) {
      throw DimensionError("adam_step: gradient " + g->shape().str() + " does not match parameter " +
                           p.name + " " + p.value.shape().str());
    }
    auto it = state.moments.find(p.name);
    if (it != state.moments.end() && it->second.m.size() != p.value.numel()) {
      throw DimensionError("adam_step: optimizer state for " + p.name + " has wrong size");
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double correction1 = 1.0 - std::pow(b1, t);
  const double correction2 = 1.0 - std::pow(b2, t);

  for (auto& p : params) {
    const Tensor* g = grads.find(p.value);
    if (g == nullptr) continue;
    auto& mom = state.moments[p.name];
    if (mom.m.empty()) {
      mom.m.assign(p.value.numel(), 0.0f);
      mom.v.assign(p.value.numel(), 0.0f);
    }
    std::span<float> theta = p.value.mutable_data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = (*g)[i];
      const double m = b1 * mom.m[i] + (1.0 - b1) * gi;
      const double v = b2 * mom.v[i] + (1.0 - b2) * gi * gi;
      mom.m[i] = static_cast<float>(m);
      mom.v[i] = static_cast<float>(v);
      const double update = cfg.learning_rate * (m / correction1) / (std::sqrt(v / correction2) + cfg.adam_eps);
      theta[i] = static_cast<float>(theta[i] - update);
    }
  }
}

Tensor random_hflip(const Tensor& x, double prob, Rng& rng) {
  const Shape& s = x.shape();
  if (s.rank() != 4) throw DimensionError("random_hflip: expected [B,H,W,C], got " + s.str());
  const std::size_t per = s.numel() / s[0];
  std::vector<float> out(x.data().begin(), x.data().end());
  bool any = false;
  for (std::size_t b = 0; b < s[0]; ++b) {
    if (rng.uniform() >= prob) continue;
    any = true;
    const Tensor one(Shape{s[1], s[2], s[3]},
                     std::vector<float>(x.data().begin() + static_cast<std::ptrdiff_t>(b * per),
                                        x.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * per)));
    const Tensor flipped = flip_width(one);
    std::copy(flipped.data().begin(), flipped.data().end(),
              out.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  if (!any) return x;
  return Tensor(s, std::move(out));
}

EpochStats train_epoch(ConvCutModel& model, const LabeledDataset& ds, const TrainConfig& cfg,
                       AdamState& state, Rng& rng) {
  if (ds.empty()) throw DataError("train_epoch: dataset is empty");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");

  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::swap(order[i], order[rng.uniform_index(i + 1)]);
  }

  double loss_sum = 0.0;
  std::size_t correct = 0;
  const std::size_t classes = model.config().num_classes;
  for (std::size_t start = 0, batch_no = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    const std::span<const std::size_t> idx(order.data() + start, end - start);
    std::vector<std::size_t> labels;
    for (std::size_t i : idx) labels.push_back(ds.labels[i]);

    with_batch_context(batch_no, [&] {
      Tensor batch = random_hflip(make_batch(ds, idx), cfg.hflip_prob, rng);
      GradTape tape;
      Tensor logits;
      Tensor loss;
      {
        TapeScope scope(tape);
        logits = model.forward(batch, true, rng);
        loss = sparse_ce_loss(logits, labels);
      }
      const GradMap grads = backward(loss, tape);
      ParameterList params = model.trainable_parameters();
      adam_step(params, grads, state, cfg);

      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const std::span<const float> row = logits.data().subspan(b * classes, classes);
        if (argmax(row) == labels[b]) ++correct;
      }
      return 0;
    });
  }
  const double n = static_cast<double>(ds.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

std::size_t Metrics::total() const {
  std::size_t n = 0;
  for (const auto& row : confusion) n += std::accumulate(row.begin(), row.end(), std::size_t{0});
  return n;
}

Metrics Metrics::from_confusion(std::vector<std::vector<std::size_t>> confusion) {
  Metrics m;
  m.confusion = std::move(confusion);
  const std::size_t k = m.confusion.size();
  const std::size_t n = m.total();
  std::size_t diag = 0;
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t tp = m.confusion[c][c];
    diag += tp;
    std::size_t row = 0;
    std::size_t col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += m.confusion[c][j];
      col += m.confusion[j][c];
    }
    const std::size_t denom = row + col;  // 2tp + fp + fn
    if (row > 0 && denom > 0) f1_sum += 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  m.accuracy = n == 0 ? 0.0 : static_cast<double>(diag) / static_cast<double>(n);
  m.macro_f1 = k == 0 ? 0.0 : f1_sum / static_cast<double>(k);
  return m;
}

std::size_t argmax(std::span<const float> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Metrics score_predictions(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                          std::size_t num_classes) {
  if (truth.size() != predicted.size()) {
    throw DimensionError("score_predictions: label and prediction counts differ");
  }
  std::vector<std::vector<std::size_t>> confusion(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) {
      throw DataError("score_predictions: sample " + std::to_string(i) + " has an out-of-range class");
    }
    ++confusion[truth[i]][predicted[i]];
  }
  return Metrics::from_confusion(std::move(confusion));
}

Metrics evaluate(const ConvCutModel& model, const LabeledDataset& ds, std::size_t batch_size) {
  if (ds.empty()) throw DataError("evaluate: dataset is empty");
  if (batch_size == 0) batch_size = 1;
  const std::size_t classes = model.config().num_classes;
  std::vector<std::size_t> predicted;
  predicted.reserve(ds.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor logits = model.forward_eval(make_batch(ds, idx));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      predicted.push_back(argmax(logits.data().subspan(b * classes, classes)));
    }
  }
  return score_predictions(ds.labels, predicted, classes);
}

std::vector<EpochStats> fit(ConvCutModel& model, const LabeledDataset& ds, const TrainConfig& cfg,
                            const std::filesystem::path& metrics_csv, const EpochCallback& on_epoch) {
  const auto problems = cfg.violations();
  if (!problems.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  std::ofstream csv;
  if (!metrics_csv.empty()) {
    csv.open(metrics_csv, std::ios::trunc);
    if (!csv) throw IoError("cannot write metrics file " + metrics_csv.string());
    csv << "epoch,loss,train_acc\n" << std::flush;
  }

  Rng rng(cfg.seed, kTrainStream);
  AdamState state;
  std::vector<EpochStats> history;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const EpochStats stats = train_epoch(model, ds, cfg, state, rng);
    history.push_back(stats);
    if (csv.is_open()) {
      char line[96];
      std::snprintf(line, sizeof line, "%zu,%.6f,%.6f\n", epoch, stats.mean_loss, stats.accuracy);
      csv << line << std::flush;
    }
    if (on_epoch) on_epoch(epoch, stats);
  }
  return history;
}

}  // namespace convcut
