#pragma once

#include <exception>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "convcut/config.hpp"
#include "convcut/data.hpp"
#include "convcut/gradcheck.hpp"
#include "convcut/model.hpp"

namespace convcut {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // verification failure or internal error
inline constexpr int kExitUsage = 2;    // bad arguments or config
inline constexpr int kExitIo = 3;       // file, data, or checkpoint problems

int exit_code_for(const std::exception& e);

// Runs body, turning exceptions into "error: ..." on err and an exit code.
int run_command(const std::function<int()>& body, std::ostream& err);

struct RunData {
  LabeledDataset train;
  LabeledDataset test;  // empty unless train_fraction < 1
  std::vector<std::string> label_map;
};

// Synthetic set if `synthetic` is given, else data_root; then the split.
RunData load_run_data(const RunConfig& cfg);

// cfg.model with num_classes filled in. An explicit num_classes that
// disagrees with the data is a ConfigError.
ConvCutConfig resolve_model_config(const RunConfig& cfg, std::size_t dataset_classes);

// Throws ConfigError listing config_violations().
void validate(const RunConfig& cfg);

std::filesystem::path checkpoint_out_path(const RunConfig& cfg);

// Each command throws on error; wrap with run_command for exit codes.
int cmd_train(const RunConfig& cfg, std::ostream& out);
int cmd_eval(const RunConfig& cfg, std::ostream& out);

struct AblationRow {
  std::string table;  // "attention x detail" or "conv layers"
  std::string config;
  bool attention = false;
  bool detail_extraction = false;
  std::size_t det_conv_layers = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

// Four attention x detail-extraction runs, then 1/2/3 conv layers with both
// enabled. Same seed for every run; scored on the test split when there is
// one, otherwise on the training set.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, std::ostream& out);
int cmd_ablate(const RunConfig& cfg, std::ostream& out);

// Prints the largest error per op and returns kExitFailure naming the worst
// element of any op over tolerance.
int run_gradcheck(const std::vector<GradCheckCase>& cases, const GradCheckOptions& opts,
                  std::ostream& out, std::ostream& err);
int cmd_gradcheck(const RunConfig& cfg, std::ostream& out, std::ostream& err);

int cmd_gradcam(const RunConfig& cfg, const std::filesystem::path& image_path,
                std::size_t class_idx, std::ostream& out);

// 0.5 * image + 0.5 * red heat, with heat upsampled (nearest) to the image.
Tensor gradcam_overlay(const Tensor& image, const Tensor& heat);

}  // namespace convcut
