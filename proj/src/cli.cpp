#include "convcut/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <map>
#include <memory>
#include <optional>

#include "convcut/commands.hpp"
#include "convcut/config.hpp"

namespace convcut {

namespace {

const std::vector<std::string> kBoolKeys = {"freeze_backbone", "enable_attention",
                                            "enable_detail_extraction"};

struct Command {
  CLI::App* app = nullptr;
  std::string config_file;
  bool print_config = false;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
};

void add_config_options(Command& cmd) {
  cmd.app->add_option("-c,--config", cmd.config_file, "config file of `key = value` lines");
  cmd.app->add_flag("--print-config", cmd.print_config, "print the resolved config and exit");
  for (const auto& key : config_keys()) {
    std::string& slot = cmd.values[key.name];
    std::string flag = "--" + key.name;
    if (key.name == "learning_rate") flag += ",--lr";
    const bool is_bool =
        std::find(kBoolKeys.begin(), kBoolKeys.end(), key.name) != kBoolKeys.end();
    cmd.options[key.name] = is_bool ? cmd.app->add_flag(flag, slot, key.help)
                                    : cmd.app->add_option(flag, slot, key.help);
  }
}

RunConfig resolve(const Command& cmd) {
  Assignments file;
  if (!cmd.config_file.empty()) file = read_config_file(cmd.config_file);
  Assignments overrides;
  for (const auto& key : config_keys()) {
    if (cmd.options.at(key.name)->count() > 0) {
      overrides.emplace_back(key.name, cmd.values.at(key.name));
    }
  }
  std::optional<std::string> env_seed;
  if (const char* s = std::getenv("CONVCUT_SEED")) env_seed = s;
  return resolve_config(file, overrides, env_seed);
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"convcut: truncated ConvNeXt with a detail extraction head"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> names = {
      {"train", "train a model and write metrics.csv plus a checkpoint"},
      {"eval", "score a checkpoint and write confusion.csv"},
      {"ablate", "attention x detail-extraction matrix and conv-layer sweep"},
      {"gradcheck", "finite-difference check of every op, layer and the tiny model"},
      {"gradcam", "Grad-CAM heatmap (PGM) and overlay (PPM) for one image"},
  };
  std::map<std::string, std::unique_ptr<Command>> commands;
  for (const auto& [name, help] : names) {
    auto cmd = std::make_unique<Command>();
    cmd->app = app.add_subcommand(name, help);
    add_config_options(*cmd);
    commands[name] = std::move(cmd);
  }
  std::string image;
  std::size_t class_idx = 0;
  CLI::App* gradcam = commands["gradcam"]->app;
  gradcam->add_option("--image", image, "input P6 PPM image")->required();
  gradcam->add_option("--class", class_idx, "class index to explain")->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  for (const auto& [name, cmd] : commands) {
    if (!cmd->app->parsed()) continue;
    return run_command(
        [&, name = name, cmd = cmd.get()]() -> int {
          const RunConfig cfg = resolve(*cmd);
          if (cmd->print_config) {
            out << dump_config(cfg);
            return kExitOk;
          }
          if (name == "train") return cmd_train(cfg, out);
          if (name == "eval") return cmd_eval(cfg, out);
          if (name == "ablate") return cmd_ablate(cfg, out);
          if (name == "gradcheck") return cmd_gradcheck(cfg, out, err);
          return cmd_gradcam(cfg, image, class_idx, out);
        },
        err);
  }
  return kExitUsage;
}

}  // namespace convcut
