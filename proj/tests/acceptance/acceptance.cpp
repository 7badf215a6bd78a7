// Acceptance checks, one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "convcut/checkpoint.hpp"
#include "convcut/commands.hpp"
#include "convcut/data.hpp"
#include "convcut/gradcheck.hpp"
#include "convcut/log.hpp"
#include "convcut/model.hpp"
#include "convcut/ops.hpp"
#include "convcut/train.hpp"
#include "oracles.hpp"

using namespace convcut;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeed = 7;
constexpr double kOracleTol = 1e-5;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 48 per class split 2/3 gives 32/class train and 16/class test.
std::pair<LabeledDataset, LabeledDataset> learnable_task() {
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.samples_per_class = 48;
  spec.image_size = 64;
  spec.noise_std = 0.1;
  spec.seed = kSeed;
  return split(generate_synthetic(spec), 2.0 / 3.0, kSeed);
}

ConvCutModel fresh_tiny(std::size_t num_classes = 2) {
  ConvCutConfig c = ConvCutConfig::tiny();
  c.num_classes = num_classes;
  Rng init(kSeed);
  return ConvCutModel::build(c, init);
}

// --- 1 ---------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = Clock::now();
  GradCheckOptions full;
  full.step = 1e-3;
  full.tolerance = 1e-3;
  full.max_elements = std::numeric_limits<std::size_t>::max();
  GradCheckOptions sampled = full;
  sampled.max_elements = 32;

  std::vector<GradCheckCase> cases = op_gradcheck_cases(kSeed, 5);
  const auto blocks = block_gradcheck_cases(kSeed, 5);
  cases.insert(cases.end(), blocks.begin(), blocks.end());

  std::map<std::string, std::size_t> instances;
  std::size_t failed = 0;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    const GradCheckResult r = check_gradients(c, full);
    ++instances[gradcheck_group(c.name)];
    if (!r.passed) {
      ++failed;
      std::printf("  gradcheck %s failed: %s[%zu] error %.3e\n", r.name.c_str(), r.worst_leaf.c_str(),
                  r.worst_index, r.max_error);
    }
    if (r.max_error > worst) worst = r.max_error, worst_name = r.name;
  }
  const GradCheckResult model = check_gradients(model_gradcheck_case(kSeed), sampled);
  if (!model.passed) ++failed;

  std::size_t fewest = std::numeric_limits<std::size_t>::max();
  for (const auto& [_, n] : instances) fewest = std::min(fewest, n);
  const double secs = seconds_since(t0);
  report(1, failed == 0 && fewest >= 5 && secs < 60.0,
         std::to_string(instances.size()) + " op/block groups x " + std::to_string(fewest) +
             " instances, worst " + fmt("%.2e", worst) + " (" + worst_name + "), model " +
             fmt("%.2e", model.max_error) + ", " + fmt("%.1f", secs) + " s");
}

// --- 2 ---------------------------------------------------------------------

void oracle_grid() {
  const auto t0 = Clock::now();
  Rng rng(kSeed);
  double worst = 0.0;
  std::size_t checked = 0;
  auto track = [&](double d) {
    worst = std::max(worst, d);
    ++checked;
  };

  for (std::size_t h = 1; h <= 8; ++h)
    for (std::size_t w = 1; w <= 8; ++w)
      for (std::size_t c = 1; c <= 4; ++c) {
        const Tensor x = oracle::random(Shape{1, h, w, c}, rng);
        for (std::size_t k = 1; k <= 4; ++k)
          for (std::size_t s : {1, 2, 4})
            for (bool same : {false, true}) {
              if (!same && (k > h || k > w)) continue;
              const Tensor kernel = oracle::random(Shape{k, k, c}, rng);
              const Tensor y = ops::conv2d_depthwise(x, kernel, s, same ? ops::Padding::kSame
                                                                       : ops::Padding::kValid);
              track(oracle::max_abs_diff(y, oracle::depthwise(x, kernel, s, same)));
            }
        for (std::size_t co = 1; co <= 4; ++co) {
          const Tensor kernel = oracle::random(Shape{c, co}, rng);
          const Tensor bias = oracle::random(Shape{co}, rng);
          track(oracle::max_abs_diff(ops::conv2d_pointwise(x, kernel, bias),
                                     oracle::pointwise(x, kernel, bias)));
        }
        track(oracle::max_abs_diff(ops::spatial_mean(x), oracle::spatial_mean(x)));
        const Tensor rows = ops::reshape(x, Shape{h * w, c});
        track(oracle::max_abs_diff(ops::softmax(rows), oracle::softmax_rows(oracle::as_double(rows), c)));
        if (c >= 2) {
          const Tensor gamma = oracle::random(Shape{c}, rng);
          const Tensor beta = oracle::random(Shape{c}, rng);
          track(oracle::max_abs_diff(ops::layer_norm(x, gamma, beta, 1e-6f),
                                     oracle::layer_norm(x, oracle::as_double(gamma),
                                                        oracle::as_double(beta), 1e-6)));
        }
      }

  for (std::size_t t = 1; t <= 8; ++t)
    for (std::size_t d = 1; d <= 4; ++d)
      for (std::size_t q = 1; q <= 4; ++q) {
        const Tensor tokens = oracle::random(Shape{t, d}, rng);
        SelfAttentionHead head;
        head.w_q = oracle::random(Shape{d, q}, rng);
        head.w_k = oracle::random(Shape{d, q}, rng);
        head.w_v = oracle::random(Shape{d, q}, rng);
        track(oracle::max_abs_diff(head.forward(tokens),
                                   oracle::attention(tokens, head.w_q, head.w_k, head.w_v)));
      }

  const double secs = seconds_since(t0);
  report(2, worst <= kOracleTol && secs < 30.0,
         std::to_string(checked) + " comparisons, max abs diff " + fmt("%.2e", worst) + ", " +
             fmt("%.1f", secs) + " s");
}

// --- 3 ---------------------------------------------------------------------

void shape_chain() {
  const auto t0 = Clock::now();
  Rng init(kSeed);
  const ConvCutModel model = ConvCutModel::build(ConvCutConfig::base(), init);
  Rng data_rng(kSeed);
  const Tensor x = oracle::random(Shape{1, 224, 224, 3}, data_rng, 0.5);
  ActivationTrace trace;
  const Tensor logits = model.forward_eval(x, &trace);

  const std::vector<std::pair<std::string, Shape>> expected = {
      {"stem", Shape{1, 56, 56, 128}},   {"stage.0", Shape{1, 56, 56, 128}},
      {"stage.1", Shape{1, 28, 28, 256}}, {"det.conv.0", Shape{1, 7, 7, 256}},
      {"det.conv.1", Shape{1, 3, 3, 256}}, {"det.pool", Shape{1, 256}},
      {"features", Shape{1, 256}},
  };
  bool ok = logits.shape() == Shape({1, 7});
  std::string chain;
  for (const auto& [name, shape] : expected) {
    const Tensor* t = trace.find(name);
    const bool match = t && t->shape() == shape;
    ok = ok && match;
    chain += (chain.empty() ? "" : " -> ") + name + " " + (t ? t->shape().str() : "missing") +
             (match ? "" : "!");
  }
  chain += " -> logits " + logits.shape().str();
  const double secs = seconds_since(t0);
  report(3, ok && secs < 30.0, chain + ", " + fmt("%.1f", secs) + " s");
}

// --- 4, 7, 8, 9 --------------------------------------------------------------

struct TrainedRun {
  ConvCutModel model;
  std::vector<EpochStats> stats;
  double seconds = 0.0;
};

TrainedRun train_learnable(const LabeledDataset& train, const fs::path& dir) {
  const auto t0 = Clock::now();
  TrainConfig cfg;  // batch 16, lr 1e-3, hflip 0.5, seed 7
  cfg.seed = kSeed;
  cfg.epochs = 200 / ((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  fs::create_directories(dir);
  ConvCutModel model = fresh_tiny();
  auto stats = fit(model, train, cfg, dir / "metrics.csv");
  save_checkpoint(model, dir / "model.ccut");
  return {std::move(model), std::move(stats), seconds_since(t0)};
}

void learnability(const TrainedRun& run, const LabeledDataset& train, const LabeledDataset& test) {
  const Metrics tr = evaluate(run.model, train);
  const Metrics te = evaluate(run.model, test);
  const double final_loss = run.stats.back().mean_loss;
  const std::size_t steps = run.stats.size() * ((train.size() + 15) / 16);
  report(4, tr.accuracy >= 0.95 && te.accuracy >= 0.90 && steps <= 200 && final_loss < 0.1 &&
                run.seconds < 300.0,
         std::to_string(steps) + " steps, train acc " + fmt("%.4f", tr.accuracy) + ", test acc " +
             fmt("%.4f", te.accuracy) + ", final epoch loss " + fmt("%.4f", final_loss) + ", " +
             fmt("%.1f", run.seconds) + " s");
}

void determinism(const fs::path& a, const LabeledDataset& train, const fs::path& root) {
  const fs::path b = root / "run_b";
  train_learnable(train, b);
  const bool csv = slurp(a / "metrics.csv") == slurp(b / "metrics.csv");
  const bool ckpt = slurp(a / "model.ccut") == slurp(b / "model.ccut");
  report(7, csv && ckpt && !slurp(a / "model.ccut").empty(),
         std::string("metrics csv ") + (csv ? "identical" : "differs") + ", checkpoint " +
             (ckpt ? "identical" : "differs"));
}

void round_trip_and_freeze(const fs::path& ckpt, const TrainedRun& trained,
                           const LabeledDataset& train) {
  Rng other(kSeed + 1);
  ConvCutModel loaded = ConvCutModel::build(trained.model.config(), other);
  load_checkpoint(ckpt, loaded, true);
  std::size_t equal = 0;
  const auto src = trained.model.parameters();
  const auto dst = loaded.parameters();
  for (std::size_t i = 0; i < src.size(); ++i)
    if (src[i].name == dst[i].name && oracle::bitwise_equal(src[i].value, dst[i].value)) ++equal;
  const bool round_trip = equal == src.size() && src.size() == dst.size();

  // Trained backbone frozen under a zeroed head, so the head has to relearn.
  ConvCutModel frozen = fresh_tiny();
  load_checkpoint(ckpt, frozen, true);
  for (auto& p : frozen.parameters())
    if (p.name.starts_with("head.")) {
      auto d = p.value.mutable_data();
      std::fill(d.begin(), d.end(), 0.f);
    }
  frozen.set_backbone_frozen(true);
  ParameterList before;
  for (const auto& p : frozen.parameters())
    if (ConvCutModel::is_backbone_parameter(p.name)) before.push_back({p.name, p.value.clone()});

  TrainConfig cfg;
  cfg.seed = kSeed;
  AdamState state;
  Rng rng(kSeed, 1);
  std::vector<double> losses;
  while (state.step < 100) losses.push_back(train_epoch(frozen, train, cfg, state, rng).mean_loss);

  std::size_t unchanged = 0;
  for (const auto& p : frozen.parameters())
    for (const auto& b : before)
      if (b.name == p.name && oracle::bitwise_equal(b.value, p.value)) ++unchanged;
  const bool frozen_ok = unchanged == before.size() && !before.empty();
  report(8, round_trip && frozen_ok && state.step == 100 && losses.back() < losses.front(),
         std::to_string(equal) + "/" + std::to_string(src.size()) + " tensors bitwise after load, " +
             std::to_string(unchanged) + "/" + std::to_string(before.size()) +
             " backbone tensors unchanged after " + std::to_string(state.step) + " frozen steps, epoch loss " + fmt("%.4f", losses.front()) + " -> " +
             fmt("%.4f", losses.back()));
}

// Quadrant k mod 4 in TL, BL, TR, BR order.
bool in_quadrant(std::size_t label, std::size_t row, std::size_t col, std::size_t h, std::size_t w) {
  const std::size_t q = label % 4;
  const bool bottom = q == 1 || q == 3;
  const bool right = q >= 2;
  return (row >= h / 2) == bottom && (col >= w / 2) == right;
}

void gradcam_sanity(const ConvCutModel& model, const LabeledDataset& test) {
  std::size_t hits = 0;
  bool bounded = true;
  std::string layer = model.default_cam_layer();
  for (std::size_t i = 0; i < test.size(); ++i) {
    const std::size_t idx[] = {i};
    const Tensor heat = grad_cam(model, make_batch(test, idx), test.labels[i]);
    const std::size_t h = heat.shape()[0], w = heat.shape()[1];
    for (float v : heat.data()) bounded = bounded && v >= 0.f && v <= 1.f;
    const std::size_t peak = argmax(heat.data());
    if (in_quadrant(test.labels[i], peak / w, peak % w, h, w)) ++hits;
  }
  const double rate = static_cast<double>(hits) / static_cast<double>(test.size());
  report(9, rate >= 0.80 && bounded,
         layer + ": argmax in the bright quadrant for " + std::to_string(hits) + "/" +
             std::to_string(test.size()) + " (" + fmt("%.1f%%", 100.0 * rate) + "), values " +
             (bounded ? "within [0,1]" : "OUT OF [0,1]"));
}

// --- 5, 6 ------------------------------------------------------------------

void ablations(const fs::path& root) {
  const auto t0 = Clock::now();
  RunConfig cfg;
  cfg.synthetic = "2x48";
  cfg.noise_std = 0.1;
  cfg.train_fraction = 2.0 / 3.0;
  cfg.train.seed = kSeed;
  cfg.train.epochs = 50;
  cfg.output_dir = root / "ablation";
  std::ostringstream log;
  const int rc = cmd_ablate(cfg, log);
  const double secs = seconds_since(t0);

  // Re-read the table the command wrote.
  std::vector<std::vector<std::string>> rows;
  std::istringstream csv(slurp(cfg.output_dir / "ablation.csv"));
  std::string header;
  std::getline(csv, header);
  for (std::string line; std::getline(csv, line);) {
    std::vector<std::string> cells;
    std::istringstream in(line);
    for (std::string cell; std::getline(in, cell, ',');) cells.push_back(cell);
    rows.push_back(cells);
  }
  auto acc = [&](const std::string& config) {
    for (const auto& r : rows)
      if (r.size() == 7 && r[1] == config) return std::stod(r[5]);
    return -1.0;
  };

  const double base = acc("baseline"), full = acc("attention+detail");
  std::string summary;
  for (const char* c : {"baseline", "attention", "detail", "attention+detail"})
    summary += std::string(summary.empty() ? "" : ", ") + c + " " + fmt("%.4f", acc(c));
  report(5, rc == 0 && rows.size() == 7 && base >= 0.0 && full >= base && secs < 900.0,
         "test acc " + summary + ", " + fmt("%.1f", secs) + " s for all runs");

  const bool schema = header == "table,config,attention,detail_extraction,det_conv_layers,accuracy,macro_f1";
  std::string layers;
  bool all_run = true;
  for (const char* c : {"layers=1", "layers=2", "layers=3"}) {
    bool found = false;
    for (const auto& r : rows)
      if (r.size() == 7 && r[1] == c) {
        found = true;
        layers += std::string(layers.empty() ? "" : ", ") + c + " acc " + r[5] + " f1 " + r[6];
      }
    all_run = all_run && found;
  }
  report(6, rc == 0 && schema && all_run && fs::exists(cfg.output_dir / "ablation.txt"), layers);
}

}  // namespace

int main() {
  set_warning_handler([](std::string_view) {});
  const fs::path root = fs::temp_directory_path() / "convcut_acceptance";
  fs::remove_all(root);

  gradient_suite();
  oracle_grid();
  shape_chain();

  const auto [train, test] = learnable_task();
  const fs::path run_a = root / "run_a";
  const TrainedRun trained = train_learnable(train, run_a);
  learnability(trained, train, test);
  ablations(root);
  determinism(run_a, train, root);
  round_trip_and_freeze(run_a / "model.ccut", trained, train);
  gradcam_sanity(trained.model, test);

  std::printf("%d of 9 criteria failed\n", failures);
  fs::remove_all(root);
  return failures;
}
