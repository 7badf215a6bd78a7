#include "convcut/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "convcut/error.hpp"

namespace convcut {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
  }
  return value;
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  return parse_number<std::size_t>(key, text);
}

double parse_double(const std::string& key, const std::string& text) {
  return parse_number<double>(key, text);
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

std::string format_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

struct KeySpec {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define CC_SIZE(field) \
  [](const RunConfig& c) { return std::to_string(c.field); }, \
      [](RunConfig& c, const std::string& v) { c.field = parse_size(#field, v); }
#define CC_DOUBLE(field) \
  [](const RunConfig& c) { return format_double(c.field); }, \
      [](RunConfig& c, const std::string& v) { c.field = parse_double(#field, v); }
#define CC_BOOL(field) \
  [](const RunConfig& c) { return format_bool(c.field); }, \
      [](RunConfig& c, const std::string& v) { c.field = parse_bool(#field, v); }
#define CC_LIST(field) \
  [](const RunConfig& c) { return format_list(c.field); }, \
      [](RunConfig& c, const std::string& v) { c.field = parse_list(#field, v); }
#define CC_STRING(field) \
  [](const RunConfig& c) { return std::string(c.field); }, \
      [](RunConfig& c, const std::string& v) { c.field = v; }

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      {{"profile", "model preset, tiny or base (applied before every other key)"},
       [](const RunConfig& c) { return c.profile; },
       [](RunConfig& c, const std::string& v) { apply_profile(c, v); }},
      {{"data_root", "dataset directory root/<class>/<image>.ppm"}, CC_STRING(data_root)},
      {{"synthetic", "generate a bright-quadrant set instead, <classes>x<per_class>"},
       CC_STRING(synthetic)},
      {{"noise_std", "synthetic pixel noise"}, CC_DOUBLE(noise_std)},
      {{"image_size", "input side length; loaded images are resized to it"}, CC_SIZE(image_size)},
      {{"train_fraction", "stratified train share in (0,1]; 1 disables the split"},
       CC_DOUBLE(train_fraction)},
      {{"eval_split", "split scored by eval: train, test, or all"}, CC_STRING(eval_split)},
      {{"checkpoint_in", "checkpoint to load"}, CC_STRING(checkpoint_in)},
      {{"checkpoint_out", "where train writes the final checkpoint"}, CC_STRING(checkpoint_out)},
      {{"output_dir", "directory for CSV, PGM and PPM outputs"}, CC_STRING(output_dir)},
      {{"target_layer", "Grad-CAM activation (default: last backbone stage)"},
       CC_STRING(target_layer)},
      {{"retained_stages", "backbone stages kept"}, CC_SIZE(model.retained_stages)},
      {{"stage_widths", "comma-separated channel widths per stage"}, CC_LIST(model.stage_widths)},
      {{"stage_depths", "comma-separated block counts per stage"}, CC_LIST(model.stage_depths)},
      {{"in_channels", "input channels"}, CC_SIZE(model.in_channels)},
      {{"num_classes", "output classes; auto takes the dataset's count"},
       [](const RunConfig& c) {
         return c.model.num_classes == 0 ? std::string("auto") : std::to_string(c.model.num_classes);
       },
       [](RunConfig& c, const std::string& v) {
         c.model.num_classes = v == "auto" ? 0 : parse_size("num_classes", v);
       }},
      {{"dropout_p", "spatial dropout rate"}, CC_DOUBLE(model.dropout_p)},
      {{"token_dim", "attention token width"}, CC_SIZE(model.token_dim)},
      {{"d_q", "attention query/key/value width"}, CC_SIZE(model.d_q)},
      {{"freeze_backbone", "exclude stem and stage parameters from updates"},
       CC_BOOL(model.freeze_backbone)},
      {{"enable_attention", "self-attention over pooled tokens"}, CC_BOOL(model.enable_attention)},
      {{"enable_detail_extraction", "detail extraction block"},
       CC_BOOL(model.enable_detail_extraction)},
      {{"det_conv_layers", "separable conv layers in detail extraction (1-3)"},
       CC_SIZE(model.det_conv_layers)},
      {{"batch_size", "samples per optimizer step"}, CC_SIZE(train.batch_size)},
      {{"epochs", "passes over the training set"}, CC_SIZE(train.epochs)},
      {{"learning_rate", "Adam step size (alias --lr)"}, CC_DOUBLE(train.learning_rate)},
      {{"adam_beta1", "Adam first-moment decay"}, CC_DOUBLE(train.adam_beta1)},
      {{"adam_beta2", "Adam second-moment decay"}, CC_DOUBLE(train.adam_beta2)},
      {{"adam_eps", "Adam denominator epsilon"}, CC_DOUBLE(train.adam_eps)},
      {{"seed", "seed for init, shuffling, augmentation, split and synthetic data"},
       [](const RunConfig& c) { return std::to_string(c.train.seed); },
       [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("seed", v); }},
      {{"hflip_prob", "horizontal flip probability during training"}, CC_DOUBLE(train.hflip_prob)},
  };
  return specs;
}

#undef CC_SIZE
#undef CC_DOUBLE
#undef CC_BOOL
#undef CC_LIST
#undef CC_STRING

const KeySpec& find_spec(const std::string& key) {
  for (const auto& s : key_specs()) {
    if (s.key.name == key) return s;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig::RunConfig() { apply_profile(*this, "tiny"); }

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& s : key_specs()) out.push_back(s.key);
    return out;
  }();
  return keys;
}

void apply_profile(RunConfig& cfg, const std::string& profile) {
  if (profile == "tiny") {
    cfg.model = ConvCutConfig::tiny();
    cfg.image_size = 64;
  } else if (profile == "base") {
    cfg.model = ConvCutConfig::base();
    cfg.image_size = 224;
  } else {
    throw ConfigError("unknown profile '" + profile + "' (expected tiny or base)");
  }
  cfg.model.num_classes = 0;
  cfg.profile = profile;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_spec(key).set(cfg, value);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  return find_spec(key).get(cfg);
}

Assignments parse_config_text(const std::string& text, const std::string& source) {
  Assignments out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    try {
      find_spec(key);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

Assignments read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

RunConfig resolve_config(const Assignments& file, const Assignments& overrides,
                         const std::optional<std::string>& env_seed) {
  RunConfig cfg;
  std::string profile = cfg.profile;
  for (const auto* list : {&file, &overrides}) {
    for (const auto& [k, v] : *list) {
      if (k == "profile") profile = v;
    }
  }
  apply_profile(cfg, profile);
  auto apply = [&](const Assignments& list) {
    for (const auto& [k, v] : list) {
      if (k != "profile") set_config_value(cfg, k, v);
    }
  };
  apply(file);
  if (env_seed) {
    try {
      set_config_value(cfg, "seed", *env_seed);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("CONVCUT_SEED: ") + e.what());
    }
  }
  apply(overrides);
  return cfg;
}

std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& s : key_specs()) out += s.key.name + " = " + s.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_violations(const RunConfig& cfg) {
  std::vector<std::string> v;
  ConvCutConfig model = cfg.model;
  if (model.num_classes == 0) model.num_classes = 2;  // checked again once the data is known
  for (auto& p : model.violations()) v.push_back(std::move(p));
  for (auto& p : cfg.train.violations()) v.push_back(std::move(p));
  if (cfg.image_size < 16) v.push_back("image_size must be >= 16");
  if (!(cfg.noise_std >= 0.0)) v.push_back("noise_std must be >= 0");
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0)) {
    v.push_back("train_fraction must be in (0, 1]");
  }
  if (cfg.eval_split != "train" && cfg.eval_split != "test" && cfg.eval_split != "all") {
    v.push_back("eval_split must be train, test, or all");
  }
  if (cfg.eval_split == "test" && cfg.train_fraction >= 1.0) {
    v.push_back("eval_split = test needs train_fraction < 1");
  }
  if (!cfg.synthetic.empty()) {
    try {
      parse_synthetic(cfg.synthetic);
    } catch (const ConfigError& e) {
      v.push_back(e.what());
    }
  }
  return v;
}

SyntheticShape parse_synthetic(const std::string& text) {
  const auto x = text.find('x');
  SyntheticShape s;
  try {
    if (x == std::string::npos) throw ConfigError("");
    s.num_classes = parse_size("synthetic", text.substr(0, x));
    s.per_class = parse_size("synthetic", text.substr(x + 1));
  } catch (const ConfigError&) {
    throw ConfigError("synthetic must look like <classes>x<per_class>, got '" + text + "'");
  }
  if (s.num_classes < 2 || s.per_class < 1) {
    throw ConfigError("synthetic needs at least 2 classes and 1 sample per class");
  }
  return s;
}

}  // namespace convcut
