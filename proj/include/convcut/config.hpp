#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "convcut/model.hpp"
#include "convcut/train.hpp"

namespace convcut {

// Everything a command needs. num_classes == 0 in the model config means
// "take it from the dataset".
struct RunConfig {
  std::string profile = "tiny";
  ConvCutConfig model;
  TrainConfig train;
  std::filesystem::path data_root;
  std::string synthetic;  // "<classes>x<per_class>", e.g. "2x32"
  double noise_std = 0.1;
  std::size_t image_size = 64;
  double train_fraction = 1.0;  // 1 keeps everything for training
  std::string eval_split = "all";  // train | test | all
  std::filesystem::path checkpoint_in;
  std::filesystem::path checkpoint_out;  // empty: <output_dir>/model.ccut
  std::filesystem::path output_dir = "convcut_out";
  std::string target_layer;  // empty: last backbone stage

  RunConfig();

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct ConfigKey {
  std::string name;
  std::string help;
};

// Every recognized key, in dump order.
const std::vector<ConfigKey>& config_keys();

// Resets the model fields and image size to a named profile: tiny or base.
void apply_profile(RunConfig& cfg, const std::string& profile);

// Assigns one key. Unknown keys and unparsable values raise ConfigError.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

using Assignments = std::vector<std::pair<std::string, std::string>>;

// `key = value` lines; blank lines and # comments are ignored. Errors carry
// the source name and line number.
Assignments parse_config_text(const std::string& text, const std::string& source = "<config>");
Assignments read_config_file(const std::filesystem::path& path);

// Defaults, then the profile (last one named anywhere), then file lines,
// then CONVCUT_SEED (if env_seed is set), then command-line overrides.
RunConfig resolve_config(const Assignments& file, const Assignments& overrides,
                         const std::optional<std::string>& env_seed);

// One `key = value` line per key; parse_config_text + resolve_config on the
// result reproduces cfg.
std::string dump_config(const RunConfig& cfg);

// Range checks across all fields; returns human-readable problems.
std::vector<std::string> config_violations(const RunConfig& cfg);

struct SyntheticShape {
  std::size_t num_classes = 0;
  std::size_t per_class = 0;
};
SyntheticShape parse_synthetic(const std::string& text);

}  // namespace convcut
