#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "convcut/checkpoint.hpp"
#include "convcut/cli.hpp"
#include "convcut/commands.hpp"
#include "convcut/data.hpp"
#include "convcut/error.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace convcut;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "convcut");
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::size_t> csv_counts(const std::string& line) {
  std::vector<std::size_t> out;
  std::istringstream in(line);
  for (std::string cell; std::getline(in, cell, ',');) out.push_back(std::stoul(cell));
  return out;
}

// Width and height from a binary PGM header, plus the pixel bytes.
std::pair<std::pair<int, int>, std::string> read_pgm_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  std::string pixels{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return {{w, h}, pixels};
}

// A scaled copy whose backward rule deliberately forgets the factor.
Tensor broken_scale(const Tensor& x) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (float& v : out) v *= 3.f;
  return record_op("broken_scale", x.shape(), std::move(out), {x},
                   {[](std::span<const float> g, std::span<std::span<float>> gi) {
                     for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                   }});
}

Tensor honest_scale(const Tensor& x) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (float& v : out) v *= 3.f;
  return record_op("honest_scale", x.shape(), std::move(out), {x},
                   {[](std::span<const float> g, std::span<std::span<float>> gi) {
                     for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += 3.f * g[i];
                   }});
}

}  // namespace

TEST_SUITE("commands") {

TEST_CASE("exit codes by error kind") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(LookupError("x")) == 2);
  CHECK(exit_code_for(IoError("x")) == 3);
  CHECK(exit_code_for(DataError("x")) == 3);
  CHECK(exit_code_for(LoadError("x")) == 3);
  CHECK(exit_code_for(NumericError("x")) == 1);
  CHECK(exit_code_for(std::runtime_error("x")) == 1);
  std::ostringstream err;
  CHECK(run_command([]() -> int { throw IoError("disk gone"); }, err) == 3);
  CHECK(err.str() == "error: disk gone\n");
}

TEST_CASE("gradcheck harness catches a corrupted backward rule") {
  Rng rng(1);
  Tensor x = oracle::random(Shape{2, 3}, rng).clone(true);
  std::vector<GradCheckCase> cases{
      {"honest_scale#0", {{"x", x}}, [x] { return honest_scale(x); }},
      {"broken_scale#0", {{"x", x}}, [x] { return broken_scale(x); }},
  };
  std::ostringstream out, err;
  CHECK(run_gradcheck(cases, GradCheckOptions{}, out, err) == kExitFailure);
  CHECK(err.str().find("op broken_scale") != std::string::npos);
  CHECK(err.str().find("x[") != std::string::npos);
  CHECK(err.str().find("honest_scale") == std::string::npos);
  CHECK(out.str().find("honest_scale") != std::string::npos);

  cases.pop_back();
  std::ostringstream out2, err2;
  CHECK(run_gradcheck(cases, GradCheckOptions{}, out2, err2) == kExitOk);
  CHECK(err2.str().empty());
}

TEST_CASE("gradcheck reports are reproducible") {
  auto run = [] {
    std::ostringstream out, err;
    GradCheckOptions opts;
    opts.max_elements = 4;
    const int rc = run_gradcheck(op_gradcheck_cases(4, 1), opts, out, err);
    return std::make_pair(rc, out.str());
  };
  const auto a = run(), b = run();
  CHECK(a.first == kExitOk);
  CHECK(a.second == b.second);
  CHECK(gradcheck_group("conv2d_depthwise#3") == "conv2d_depthwise");
}

TEST_CASE("train smoke run") {
  TempDir dir("convcut_cmd_smoke");
  const CliResult r = run_cli({"train", "--synthetic", "2x32", "--profile", "tiny", "--epochs", "3",
                               "--output_dir", dir.path.string()});
  REQUIRE(r.code == 0);
  const auto csv = lines(slurp(dir.path / "metrics.csv"));
  REQUIRE(csv.size() == 4);
  CHECK(csv[0] == "epoch,loss,train_acc");
  CHECK(csv[3].starts_with("3,"));
  CHECK(fs::exists(dir.path / "model.ccut"));
  CHECK(r.out.find("epoch 3/3 loss ") != std::string::npos);
}

TEST_CASE("zero learning rate writes the initial parameters") {
  TempDir dir("convcut_cmd_lr0");
  const CliResult r = run_cli({"train", "--synthetic", "2x8", "--epochs", "2", "--lr", "0",
                               "--seed", "5", "--output_dir", dir.path.string()});
  REQUIRE(r.code == 0);
  ConvCutConfig c = ConvCutConfig::tiny();
  Rng init(5);
  ConvCutModel fresh = ConvCutModel::build(c, init);
  const auto entries = read_checkpoint(dir.path / "model.ccut");
  REQUIRE(entries.size() == fresh.parameters().size());
  for (const auto& p : fresh.parameters()) {
    auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.name == p.name; });
    REQUIRE(it != entries.end());
    CHECK(oracle::bitwise_equal(Tensor(it->shape, it->data), p.value));
  }
}

TEST_CASE("same seed gives identical metrics and checkpoints") {
  TempDir a("convcut_cmd_det_a"), b("convcut_cmd_det_b");
  for (const auto* d : {&a, &b}) {
    REQUIRE(run_cli({"train", "--synthetic", "2x8", "--epochs", "2", "--seed", "7", "--output_dir",
                     d->path.string()})
                .code == 0);
  }
  CHECK(slurp(a.path / "metrics.csv") == slurp(b.path / "metrics.csv"));
  CHECK(slurp(a.path / "model.ccut") == slurp(b.path / "model.ccut"));

  setenv("CONVCUT_SEED", "8", 1);
  REQUIRE(run_cli({"train", "--synthetic", "2x8", "--epochs", "2", "--output_dir", b.path.string()})
              .code == 0);
  unsetenv("CONVCUT_SEED");
  CHECK(slurp(a.path / "metrics.csv") != slurp(b.path / "metrics.csv"));
}

TEST_CASE("eval after memorizing a small set") {
  TempDir dir("convcut_cmd_eval");
  const std::string out = dir.path.string();
  REQUIRE(run_cli({"train", "--synthetic", "2x8", "--batch_size", "4", "--epochs", "25",
                   "--output_dir", out}).code == 0);
  const std::string ckpt = (dir.path / "model.ccut").string();

  const CliResult r = run_cli({"eval", "--synthetic", "2x8", "--checkpoint_in", ckpt, "--output_dir", out});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("samples 16") != std::string::npos);
  CHECK(r.out.find("accuracy 1.0000") != std::string::npos);
  CHECK(r.out.find("macro_f1 1.0000") != std::string::npos);

  const std::string first = slurp(dir.path / "confusion.csv");
  const auto rows = lines(first);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == "class0,class1");
  for (std::size_t i = 1; i < 3; ++i) {
    const auto counts = csv_counts(rows[i]);
    CHECK(std::accumulate(counts.begin(), counts.end(), std::size_t{0}) == 8);
  }
  REQUIRE(run_cli({"eval", "--synthetic", "2x8", "--checkpoint_in", ckpt, "--output_dir", out}).code == 0);
  CHECK(slurp(dir.path / "confusion.csv") == first);

  // Uneven split: rows still sum to the per-class counts of the evaluated set.
  REQUIRE(run_cli({"eval", "--synthetic", "2x9", "--train_fraction", "0.5", "--eval_split", "test",
                   "--checkpoint_in", ckpt, "--output_dir", out})
              .code == 0);
  const auto test_rows = lines(slurp(dir.path / "confusion.csv"));
  for (std::size_t i = 1; i < 3; ++i) {
    const auto counts = csv_counts(test_rows[i]);
    CHECK(std::accumulate(counts.begin(), counts.end(), std::size_t{0}) == 5);
  }

  const CliResult mismatch = run_cli({"eval", "--synthetic", "2x8", "--checkpoint_in", ckpt,
                                      "--token_dim", "4", "--output_dir", out});
  CHECK(mismatch.code == kExitIo);
  CHECK(mismatch.err.find("attention") != std::string::npos);
  CHECK(run_cli({"eval", "--synthetic", "2x8", "--output_dir", out}).code == kExitUsage);
  CHECK(run_cli({"eval", "--synthetic", "3x8", "--checkpoint_in", ckpt, "--output_dir", out}).code ==
        kExitIo);
}

TEST_CASE("ablation tables") {
  TempDir dir("convcut_cmd_ablate");
  std::vector<std::string> args{"ablate", "--synthetic", "2x6", "--train_fraction", "0.5",
                                "--epochs", "1", "--output_dir", dir.path.string()};
  const CliResult r = run_cli(args);
  REQUIRE(r.code == 0);
  const std::string csv = slurp(dir.path / "ablation.csv");
  const auto rows = lines(csv);
  REQUIRE(rows.size() == 8);
  CHECK(rows[0] == "table,config,attention,detail_extraction,det_conv_layers,accuracy,macro_f1");
  for (std::size_t i = 1; i <= 4; ++i) CHECK(rows[i].starts_with("attention x detail,"));
  for (std::size_t i = 5; i <= 7; ++i) CHECK(rows[i].starts_with("conv layers,"));
  CHECK(rows[7].find(",3,") != std::string::npos);
  const std::string text = slurp(dir.path / "ablation.txt");
  CHECK(text.find("macro_f1") != std::string::npos);

  REQUIRE(run_cli(args).code == 0);
  CHECK(slurp(dir.path / "ablation.csv") == csv);
}

TEST_CASE("grad-cam outputs") {
  TempDir dir("convcut_cmd_cam");
  const std::string out = dir.path.string();
  REQUIRE(run_cli({"train", "--synthetic", "2x8", "--epochs", "2", "--output_dir", out}).code == 0);
  const std::string ckpt = (dir.path / "model.ccut").string();

  SyntheticSpec spec;
  spec.samples_per_class = 1;
  const LabeledDataset ds = generate_synthetic(spec);
  write_ppm(dir.path / "img.ppm", ds.images[0]);
  const std::string img = (dir.path / "img.ppm").string();

  const CliResult r = run_cli({"gradcam", "--checkpoint_in", ckpt, "--image", img, "--class", "0",
                               "--output_dir", out});
  REQUIRE(r.code == 0);
  auto [dims, pixels] = read_pgm_bytes(dir.path / "gradcam.pgm");
  CHECK(dims == std::pair<int, int>{8, 8});
  CHECK(pixels.size() == 64);
  const Tensor overlay = read_ppm(dir.path / "gradcam_overlay.ppm");
  CHECK(overlay.shape() == Shape({64, 64, 3}));

  REQUIRE(run_cli({"gradcam", "--checkpoint_in", ckpt, "--image", img, "--class", "0",
                   "--target_layer", "stage.0", "--output_dir", out})
              .code == 0);
  CHECK(read_pgm_bytes(dir.path / "gradcam.pgm").first == std::pair<int, int>{16, 16});

  CHECK(run_cli({"gradcam", "--checkpoint_in", ckpt, "--image", img, "--class", "2",
                 "--output_dir", out}).code == kExitUsage);
  CHECK(run_cli({"gradcam", "--checkpoint_in", ckpt, "--image", img, "--class", "0",
                 "--target_layer", "nowhere", "--output_dir", out}).code == kExitUsage);
  CHECK(run_cli({"gradcam", "--checkpoint_in", ckpt, "--image", out + "/none.ppm", "--class", "0",
                 "--output_dir", out}).code == kExitIo);

  // Zero head: uniformly black heatmap.
  Rng init(7);
  ConvCutModel m = ConvCutModel::build(ConvCutConfig::tiny(), init);
  for (auto& p : m.parameters())
    if (p.name == "head.weight") std::fill(p.value.mutable_data().begin(), p.value.mutable_data().end(), 0.f);
  save_checkpoint(m, dir.path / "zero.ccut");
  REQUIRE(run_cli({"gradcam", "--checkpoint_in", (dir.path / "zero.ccut").string(), "--image", img,
                   "--class", "1", "--output_dir", out})
              .code == 0);
  const std::string black = read_pgm_bytes(dir.path / "gradcam.pgm").second;
  CHECK(black.size() == 64);
  CHECK(std::all_of(black.begin(), black.end(), [](char c) { return c == 0; }));
}

TEST_CASE("overlay blends half image and half red heat") {
  Tensor image = Tensor::full(Shape{4, 4, 3}, 0.5f);
  Tensor heat(Shape{2, 2}, {1.f, 0.f, 0.f, 0.5f});
  Tensor o = gradcam_overlay(image, heat);
  CHECK(o[0] == 0.75f);
  CHECK(o[1] == 0.25f);
  CHECK(o[2] == 0.25f);
  CHECK(o[(3 * 4 + 3) * 3] == 0.5f);
  CHECK(o[(0 * 4 + 3) * 3] == 0.25f);
}

}  // TEST_SUITE
