#include "convcut/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "convcut/checkpoint.hpp"
#include "convcut/error.hpp"
#include "convcut/ops.hpp"
#include "convcut/rng.hpp"
#include "convcut/train.hpp"

namespace convcut {

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

const LabeledDataset& pick_split(const RunData& data, const std::string& which,
                                 LabeledDataset& merged) {
  if (which == "train") return data.train;
  if (which == "test") return data.test;
  merged = data.train;
  merged.images.insert(merged.images.end(), data.test.images.begin(), data.test.images.end());
  merged.labels.insert(merged.labels.end(), data.test.labels.begin(), data.test.labels.end());
  return merged;
}

// Class count for a checkpoint-only command: explicit config, else the
// length of the stored head bias.
std::size_t classes_from_checkpoint(const RunConfig& cfg) {
  if (cfg.model.num_classes != 0) return cfg.model.num_classes;
  for (const auto& e : read_checkpoint(cfg.checkpoint_in)) {
    if (e.name == "head.bias" && e.shape.rank() == 1) return e.shape[0];
  }
  throw LoadError("checkpoint " + cfg.checkpoint_in.string() + " has no head.bias entry");
}

void require_checkpoint(const RunConfig& cfg, const std::string& command) {
  if (cfg.checkpoint_in.empty()) throw ConfigError(command + " needs checkpoint_in");
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const LookupError*>(&e)) {
    return kExitUsage;
  }
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const DataError*>(&e) ||
      dynamic_cast<const LoadError*>(&e)) {
    return kExitIo;
  }
  return kExitFailure;
}

int run_command(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

void validate(const RunConfig& cfg) {
  const auto problems = config_violations(cfg);
  if (problems.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ConfigError(msg);
}

RunData load_run_data(const RunConfig& cfg) {
  LabeledDataset all;
  if (!cfg.synthetic.empty()) {
    const SyntheticShape shape = parse_synthetic(cfg.synthetic);
    SyntheticSpec spec;
    spec.num_classes = shape.num_classes;
    spec.samples_per_class = shape.per_class;
    spec.image_size = cfg.image_size;
    spec.noise_std = cfg.noise_std;
    spec.seed = cfg.train.seed;
    all = generate_synthetic(spec);
  } else if (!cfg.data_root.empty()) {
    all = load_dataset(cfg.data_root, cfg.image_size);
  } else {
    throw ConfigError("no data: set data_root or synthetic");
  }
  if (all.empty()) throw DataError("dataset is empty");

  RunData data;
  data.label_map = all.label_map;
  if (cfg.train_fraction < 1.0) {
    auto [train, test] = split(all, cfg.train_fraction, cfg.train.seed);
    data.train = std::move(train);
    data.test = std::move(test);
  } else {
    data.train = std::move(all);
    data.test.label_map = data.label_map;
  }
  if (data.train.empty()) throw DataError("training split is empty");
  return data;
}

ConvCutConfig resolve_model_config(const RunConfig& cfg, std::size_t dataset_classes) {
  ConvCutConfig model = cfg.model;
  if (model.num_classes == 0) {
    model.num_classes = dataset_classes;
  } else if (model.num_classes != dataset_classes) {
    throw ConfigError("num_classes = " + std::to_string(model.num_classes) + " but the dataset has " +
                      std::to_string(dataset_classes) + " classes");
  }
  return model;
}

std::filesystem::path checkpoint_out_path(const RunConfig& cfg) {
  return cfg.checkpoint_out.empty() ? cfg.output_dir / "model.ccut" : cfg.checkpoint_out;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  validate(cfg);
  const RunData data = load_run_data(cfg);
  Rng init(cfg.train.seed);
  ConvCutModel model =
      ConvCutModel::build(resolve_model_config(cfg, data.label_map.size()), init);
  if (!cfg.checkpoint_in.empty()) {
    const LoadReport report = load_checkpoint(cfg.checkpoint_in, model, false);
    out << "loaded " << report.loaded.size() << " tensors from " << cfg.checkpoint_in.string()
        << " (" << report.uninitialized.size() << " left at init, " << report.unexpected.size()
        << " ignored, " << report.shape_mismatch.size() << " shape mismatches)\n";
  }
  out << "training on " << data.train.size() << " samples, " << model.parameter_count()
      << " parameters\n";

  ensure_dir(cfg.output_dir);
  const auto metrics = cfg.output_dir / "metrics.csv";
  fit(model, data.train, cfg.train, metrics, [&](std::size_t epoch, const EpochStats& s) {
    out << "epoch " << epoch << "/" << cfg.train.epochs << " loss " << fmt("%.6f", s.mean_loss)
        << " train_acc " << fmt("%.4f", s.accuracy) << "\n"
        << std::flush;
  });

  const auto ckpt = checkpoint_out_path(cfg);
  save_checkpoint(model, ckpt);
  out << "wrote " << metrics.string() << " and " << ckpt.string() << "\n";
  if (!data.test.empty()) {
    const Metrics m = evaluate(model, data.test, cfg.train.batch_size);
    out << "test accuracy " << fmt("%.4f", m.accuracy) << " macro_f1 " << fmt("%.4f", m.macro_f1)
        << "\n";
  }
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  validate(cfg);
  require_checkpoint(cfg, "eval");
  const RunData data = load_run_data(cfg);
  Rng init(cfg.train.seed);
  ConvCutModel model =
      ConvCutModel::build(resolve_model_config(cfg, data.label_map.size()), init);
  load_checkpoint(cfg.checkpoint_in, model, true);

  LabeledDataset merged;
  const LabeledDataset& ds = pick_split(data, cfg.eval_split, merged);
  const Metrics m = evaluate(model, ds, cfg.train.batch_size);
  out << "samples " << ds.size() << "\n";
  out << "accuracy " << fmt("%.4f", m.accuracy) << "\n";
  out << "macro_f1 " << fmt("%.4f", m.macro_f1) << "\n";

  ensure_dir(cfg.output_dir);
  const auto path = cfg.output_dir / "confusion.csv";
  std::ofstream csv = open_output(path);
  for (std::size_t k = 0; k < data.label_map.size(); ++k) {
    csv << (k ? "," : "") << data.label_map[k];
  }
  csv << "\n";
  for (const auto& row : m.confusion) {
    for (std::size_t k = 0; k < row.size(); ++k) csv << (k ? "," : "") << row[k];
    csv << "\n";
  }
  if (!csv) throw IoError("cannot write " + path.string());
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, std::ostream& out) {
  validate(cfg);
  const RunData data = load_run_data(cfg);
  const bool on_test = !data.test.empty();
  const LabeledDataset& scored = on_test ? data.test : data.train;

  std::vector<AblationRow> rows = {
      {"attention x detail", "baseline", false, false, cfg.model.det_conv_layers},
      {"attention x detail", "attention", true, false, cfg.model.det_conv_layers},
      {"attention x detail", "detail", false, true, cfg.model.det_conv_layers},
      {"attention x detail", "attention+detail", true, true, cfg.model.det_conv_layers},
      {"conv layers", "layers=1", true, true, 1},
      {"conv layers", "layers=2", true, true, 2},
      {"conv layers", "layers=3", true, true, 3},
  };
  for (auto& row : rows) {
    ConvCutConfig model_cfg = resolve_model_config(cfg, data.label_map.size());
    model_cfg.enable_attention = row.attention;
    model_cfg.enable_detail_extraction = row.detail_extraction;
    model_cfg.det_conv_layers = row.det_conv_layers;
    Rng init(cfg.train.seed);
    ConvCutModel model = ConvCutModel::build(model_cfg, init);
    fit(model, data.train, cfg.train);
    const Metrics m = evaluate(model, scored, cfg.train.batch_size);
    row.accuracy = m.accuracy;
    row.macro_f1 = m.macro_f1;
    out << row.table << " / " << row.config << ": accuracy " << fmt("%.4f", m.accuracy)
        << " macro_f1 " << fmt("%.4f", m.macro_f1) << "\n"
        << std::flush;
  }
  return rows;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out) {
  const auto rows = run_ablation(cfg, out);
  ensure_dir(cfg.output_dir);
  const bool on_test = cfg.train_fraction < 1.0;

  const auto csv_path = cfg.output_dir / "ablation.csv";
  std::ofstream csv = open_output(csv_path);
  csv << "table,config,attention,detail_extraction,det_conv_layers,accuracy,macro_f1\n";
  for (const auto& r : rows) {
    csv << r.table << "," << r.config << "," << (r.attention ? 1 : 0) << ","
        << (r.detail_extraction ? 1 : 0) << "," << r.det_conv_layers << ","
        << fmt("%.6f", r.accuracy) << "," << fmt("%.6f", r.macro_f1) << "\n";
  }

  const auto txt_path = cfg.output_dir / "ablation.txt";
  std::ofstream txt = open_output(txt_path);
  txt << "# scored on the " << (on_test ? "test split" : "training set")
      << "; macro_f1 is the unweighted mean of per-class F1\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %-18s %-9s %-6s %-6s %-8s %-8s\n", "table", "config",
                "attention", "detail", "layers", "accuracy", "macro_f1");
  txt << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-20s %-18s %-9s %-6s %-6zu %-8.4f %-8.4f\n", r.table.c_str(),
                  r.config.c_str(), r.attention ? "yes" : "no", r.detail_extraction ? "yes" : "no",
                  r.det_conv_layers, r.accuracy, r.macro_f1);
    txt << line;
  }
  if (!csv || !txt) throw IoError("cannot write ablation results in " + cfg.output_dir.string());
  out << "wrote " << csv_path.string() << " and " << txt_path.string() << "\n";
  return kExitOk;
}

int run_gradcheck(const std::vector<GradCheckCase>& cases, const GradCheckOptions& opts,
                  std::ostream& out, std::ostream& err) {
  std::vector<GradCheckResult> worst;  // per op group, first-seen order
  for (const auto& c : cases) {
    GradCheckResult r = check_gradients(c, opts);
    const std::string group = gradcheck_group(r.name);
    auto it = std::find_if(worst.begin(), worst.end(),
                           [&](const GradCheckResult& w) { return gradcheck_group(w.name) == group; });
    if (it == worst.end()) {
      worst.push_back(r);
    } else {
      const std::size_t checked = it->checked + r.checked;
      if (r.max_error > it->max_error) *it = r;
      it->checked = checked;
      it->passed = it->passed && r.passed;
    }
  }

  bool ok = true;
  char line[200];
  for (const auto& w : worst) {
    std::snprintf(line, sizeof line, "%-20s max_rel_err %.3e  worst %s[%zu]  (%zu elements)  %s\n",
                  gradcheck_group(w.name).c_str(), w.max_error, w.worst_leaf.c_str(), w.worst_index,
                  w.checked, w.passed ? "ok" : "FAIL");
    out << line;
    if (!w.passed) {
      ok = false;
      err << "gradcheck failed: op " << gradcheck_group(w.name) << " (case " << w.name
          << ") element " << w.worst_leaf << "[" << w.worst_index << "] relative error "
          << fmt("%.3e", w.max_error) << " > " << fmt("%.0e", opts.tolerance) << "\n";
    }
  }
  return ok ? kExitOk : kExitFailure;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  GradCheckOptions opts;
  opts.seed = cfg.train.seed;
  auto cases = op_gradcheck_cases(cfg.train.seed, 5);
  auto blocks = block_gradcheck_cases(cfg.train.seed, 5);
  cases.insert(cases.end(), blocks.begin(), blocks.end());
  cases.push_back(model_gradcheck_case(cfg.train.seed));
  return run_gradcheck(cases, opts, out, err);
}

Tensor gradcam_overlay(const Tensor& image, const Tensor& heat) {
  const std::size_t h = image.shape()[0];
  const std::size_t w = image.shape()[1];
  const std::size_t hh = heat.shape()[0];
  const std::size_t hw = heat.shape()[1];
  std::vector<float> data(image.numel());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const float v = heat[(y * hh / h) * hw + x * hw / w];
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = (y * w + x) * 3 + c;
        data[i] = 0.5f * image[i] + (c == 0 ? 0.5f * v : 0.0f);
      }
    }
  }
  return Tensor(image.shape(), std::move(data));
}

int cmd_gradcam(const RunConfig& cfg, const std::filesystem::path& image_path,
                std::size_t class_idx, std::ostream& out) {
  validate(cfg);
  require_checkpoint(cfg, "gradcam");
  ConvCutConfig model_cfg = cfg.model;
  model_cfg.num_classes = classes_from_checkpoint(cfg);
  Rng init(cfg.train.seed);
  ConvCutModel model = ConvCutModel::build(model_cfg, init);
  load_checkpoint(cfg.checkpoint_in, model, true);

  Tensor image = read_ppm(image_path);
  if (image.shape()[0] != cfg.image_size || image.shape()[1] != cfg.image_size) {
    image = resize_nearest(image, cfg.image_size);
  }
  const Tensor batch = ops::reshape(image, Shape{1, cfg.image_size, cfg.image_size, 3});
  const Tensor heat = grad_cam(model, batch, class_idx, cfg.target_layer);

  ensure_dir(cfg.output_dir);
  const auto pgm = cfg.output_dir / "gradcam.pgm";
  const auto ppm = cfg.output_dir / "gradcam_overlay.ppm";
  write_pgm(pgm, heat);
  write_ppm(ppm, gradcam_overlay(image, heat));

  const std::size_t peak =
      static_cast<std::size_t>(std::max_element(heat.data().begin(), heat.data().end()) -
                               heat.data().begin());
  const std::size_t hw = heat.shape()[1];
  out << "layer " << (cfg.target_layer.empty() ? model.default_cam_layer() : cfg.target_layer)
      << " heatmap " << heat.shape()[0] << "x" << hw << " peak " << fmt("%.4f", heat[peak])
      << " at row " << peak / hw << " col " << peak % hw << "\n";
  out << "wrote " << pgm.string() << " and " << ppm.string() << "\n";
  return kExitOk;
}

}  // namespace convcut
