#include "convcut/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "convcut/error.hpp"
#include "convcut/model.hpp"
#include "convcut/ops.hpp"
#include "convcut/train.hpp"

namespace convcut {

namespace {

using ops::Padding;

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  std::vector<float> data(shape.numel());
  for (float& v : data) v = static_cast<float>(scale * rng.normal());
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor leaf(Shape shape, Rng& rng, double scale = 1.0) {
  return random_tensor(std::move(shape), rng, scale, true);
}

// Weight scale that keeps outputs O(1): the f32 rounding of large outputs
// is what limits central differences at a fixed step.
double fan_in(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.uniform_index(hi - lo + 1);
}

// Rows (last axis) with std >= 0.5. Layer norm is nearly a step function
// on rows with tiny variance, where central differences cannot resolve it.
Tensor well_conditioned_rows(Shape shape, Rng& rng) {
  const std::size_t c = shape.back();
  std::vector<float> data(shape.numel());
  for (std::size_t r = 0; r < data.size() / c; ++r) {
    for (;;) {
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        data[r * c + j] = static_cast<float>(rng.normal());
        mean += data[r * c + j];
      }
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) var += (data[r * c + j] - mean) * (data[r * c + j] - mean);
      if (var / static_cast<double>(c) >= 0.25) break;
    }
  }
  return Tensor(std::move(shape), std::move(data), true);
}

std::string case_name(const std::string& op, std::size_t i) { return op + "#" + std::to_string(i); }

// Replaces every parameter with N(0, scale^2 / fan_in) so gradients are
// well away from zero; init values like layer_scale=1e-6 would make checks
// vacuous. fan_in is the product of all but the last axis (1 for vectors).
void randomize(const ParameterList& params, Rng& rng, double scale) {
  for (auto p : params) {
    const std::size_t fan = p.value.numel() / p.value.shape().back();
    const double sd = scale * fan_in(fan);
    for (float& v : p.value.mutable_data()) v = static_cast<float>(sd * rng.normal());
  }
}

void rescale(const ParameterList& params, const std::string& name, double factor) {
  for (auto p : params) {
    if (p.name != name) continue;
    for (float& v : p.value.mutable_data()) v = static_cast<float>(v * factor);
  }
}

}  // namespace

std::string gradcheck_group(const std::string& case_name) {
  return case_name.substr(0, case_name.find('#'));
}

GradCheckResult check_gradients(const GradCheckCase& c, const GradCheckOptions& opts) {
  GradCheckResult result;
  result.name = c.name;

  GradTape tape;
  Tensor loss;
  Tensor weights;
  {
    TapeScope scope(tape);
    const Tensor y = c.output();
    if (c.scalar_loss) {
      loss = y;
    } else {
      Rng w_rng(opts.seed, 99);
      weights = random_tensor(y.shape(), w_rng);
      loss = ops::sum(ops::mul(y, weights));
    }
  }
  const GradMap grads = backward(loss, tape);

  auto objective = [&]() -> double {
    const Tensor y = c.output();
    if (c.scalar_loss) return y.item();
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += static_cast<double>(weights[i]) * y[i];
    return acc;
  };

  Rng rng(opts.seed);
  for (auto entry : c.leaves) {
    Tensor& t = entry.value;
    const Tensor* g = grads.find(t);
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opts.max_elements) {
      for (std::size_t i = 0; i < opts.max_elements; ++i) {
        std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
      }
      idx.resize(opts.max_elements);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      std::span<float> data = t.mutable_data();
      const float original = data[i];
      data[i] = static_cast<float>(original + opts.step);
      const double plus = objective();
      data[i] = static_cast<float>(original - opts.step);
      const double minus = objective();
      data[i] = original;
      // Use the step actually representable in f32.
      const double h2 = static_cast<double>(static_cast<float>(original + opts.step)) -
                        static_cast<double>(static_cast<float>(original - opts.step));
      const double numeric = (plus - minus) / h2;
      const double analytic = g ? (*g)[i] : 0.0;
      const double scale = std::max({1.0, std::fabs(numeric), std::fabs(analytic)});
      const double err = std::fabs(numeric - analytic) / scale;
      ++result.checked;
      if (result.worst_leaf.empty() || err > result.max_error) {
        result.max_error = err;
        result.worst_leaf = entry.name;
        result.worst_index = i;
      }
    }
  }
  result.passed = result.max_error <= opts.tolerance;
  return result;
}

std::vector<GradCheckCase> op_gradcheck_cases(std::uint64_t seed, std::size_t instances) {
  Rng rng(seed, 11);
  std::vector<GradCheckCase> cases;
  for (std::size_t i = 0; i < instances; ++i) {
    {
      const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
      Tensor a = leaf(Shape{m, k}, rng), b = leaf(Shape{k, n}, rng, fan_in(k));
      cases.push_back({case_name("matmul", i), {{"a", a}, {"b", b}},
                       [=] { return ops::matmul(a, b); }});
    }
    {
      const std::size_t bt = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4),
                        n = pick(rng, 1, 4);
      Tensor a = leaf(Shape{bt, m, k}, rng), b = leaf(Shape{bt, k, n}, rng, fan_in(k));
      Tensor w = leaf(Shape{k, n}, rng, fan_in(k));
      cases.push_back({case_name("matmul_batched", i), {{"a", a}, {"b", b}, {"w", w}},
                       [=] { return ops::add(ops::matmul(a, b), ops::matmul(a, w)); }});
    }
    {
      Tensor x = leaf(Shape{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng);
      cases.push_back({case_name("transpose", i), {{"x", x}}, [=] { return ops::transpose(x); }});
    }
    {
      Tensor x = leaf(Shape{pick(rng, 1, 4), pick(rng, 2, 8)}, rng, 2.0);
      cases.push_back({case_name("softmax", i), {{"x", x}}, [=] { return ops::softmax(x); }});
    }
    {
      Tensor x = leaf(Shape{pick(rng, 1, 4), pick(rng, 1, 6)}, rng, 2.0);
      cases.push_back({case_name("gelu", i), {{"x", x}}, [=] { return ops::gelu(x); }});
    }
    {
      const std::size_t c = pick(rng, 3, 6);
      Tensor x = well_conditioned_rows(Shape{pick(rng, 1, 3), pick(rng, 1, 3), c}, rng);
      Tensor gamma = leaf(Shape{c}, rng), beta = leaf(Shape{c}, rng);
      cases.push_back({case_name("layer_norm", i), {{"x", x}, {"gamma", gamma}, {"beta", beta}},
                       [=] { return ops::layer_norm(x, gamma, beta, 1e-6f); }});
    }
    {
      const std::size_t k = pick(rng, 1, 4), stride = pick(rng, 1, 3), c = pick(rng, 1, 4);
      const Padding pad = i % 2 == 0 ? Padding::kValid : Padding::kSame;
      Tensor x = leaf(Shape{pick(rng, 1, 2), pick(rng, k, 8), pick(rng, k, 8), c}, rng);
      Tensor kernel = leaf(Shape{k, k, c}, rng, fan_in(k * k));
      cases.push_back({case_name("conv2d_depthwise", i), {{"x", x}, {"kernel", kernel}},
                       [=] { return ops::conv2d_depthwise(x, kernel, stride, pad); }});
    }
    {
      const std::size_t cin = pick(rng, 1, 4), cout = pick(rng, 1, 4);
      Tensor x = leaf(Shape{pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 4), cin}, rng);
      Tensor kernel = leaf(Shape{cin, cout}, rng, fan_in(cin)), bias = leaf(Shape{cout}, rng);
      cases.push_back({case_name("conv2d_pointwise", i), {{"x", x}, {"kernel", kernel}, {"bias", bias}},
                       [=] { return ops::conv2d_pointwise(x, kernel, bias); }});
    }
    {
      const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 3), cin = pick(rng, 1, 3),
                        cout = pick(rng, 1, 3);
      const Padding pad = i % 2 == 0 ? Padding::kSame : Padding::kValid;
      Tensor x = leaf(Shape{1, pick(rng, k, 6), pick(rng, k, 6), cin}, rng);
      Tensor kernel = leaf(Shape{k, k, cin, cout}, rng, fan_in(k * k * cin)), bias = leaf(Shape{cout}, rng);
      cases.push_back({case_name("conv2d", i), {{"x", x}, {"kernel", kernel}, {"bias", bias}},
                       [=] { return ops::conv2d(x, kernel, bias, stride, pad); }});
    }
    {
      const std::size_t cin = pick(rng, 1, 5), cout = pick(rng, 1, 5);
      Tensor x = leaf(Shape{pick(rng, 1, 2), pick(rng, 1, 3), cin}, rng);
      Tensor w = leaf(Shape{cin, cout}, rng, fan_in(cin)), bias = leaf(Shape{cout}, rng);
      cases.push_back({case_name("dense", i), {{"x", x}, {"w", w}, {"bias", bias}},
                       [=] { return ops::dense(x, w, bias); }});
    }
    {
      Tensor x = leaf(Shape{pick(rng, 1, 2), pick(rng, 1, 5), pick(rng, 1, 5), pick(rng, 1, 4)}, rng);
      cases.push_back({case_name("spatial_mean", i), {{"x", x}}, [=] { return ops::spatial_mean(x); }});
    }
    {
      Tensor x = leaf(Shape{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 2, 6)}, rng);
      const std::uint64_t mask_seed = rng.next_u64();
      cases.push_back({case_name("spatial_dropout", i), {{"x", x}}, [=] {
                         Rng mask_rng(mask_seed);
                         return ops::spatial_dropout(x, 0.3, true, mask_rng);
                       }});
    }
    {
      const std::size_t c = pick(rng, 1, 5);
      Tensor x = leaf(Shape{pick(rng, 1, 3), pick(rng, 1, 3), c}, rng);
      Tensor s = leaf(Shape{c}, rng), b = leaf(Shape{c}, rng);
      Tensor y = leaf(x.shape(), rng);
      cases.push_back({case_name("elementwise", i), {{"x", x}, {"s", s}, {"b", b}, {"y", y}}, [=] {
                         const Tensor h = ops::add_channel(ops::mul_channel(x, s), b);
                         return ops::scale(ops::add(ops::mul(h, y), x), 0.7f);
                       }});
    }
    {
      const std::size_t batch = pick(rng, 1, 4), k = pick(rng, 2, 7);
      Tensor logits = leaf(Shape{batch, k}, rng, 2.0);
      std::vector<std::size_t> labels(batch);
      for (auto& l : labels) l = rng.uniform_index(k);
      cases.push_back({case_name("sparse_ce_loss", i), {{"logits", logits}},
                       [=] { return sparse_ce_loss(logits, labels); }, true});
    }
  }
  return cases;
}

std::vector<GradCheckCase> block_gradcheck_cases(std::uint64_t seed, std::size_t instances) {
  Rng rng(seed, 12);
  std::vector<GradCheckCase> cases;
  auto leaves_with_input = [](const Tensor& x, ParameterList params) {
    params.insert(params.begin(), {"input", x});
    return params;
  };
  for (std::size_t i = 0; i < instances; ++i) {
    {
      const std::size_t c = pick(rng, 1, 3), cout = pick(rng, 1, 3), k = pick(rng, 2, 4);
      auto layer = SeparableConv2d::create(c, cout, k, k, Padding::kValid, rng);
      ParameterList params;
      layer.collect("", params);
      randomize(params, rng, 1.0);
      Tensor x = leaf(Shape{1, pick(rng, k, 8), pick(rng, k, 8), c}, rng);
      cases.push_back({case_name("separable_conv", i), leaves_with_input(x, params),
                       [=] { return layer.forward(x); }});
    }
    {
      const std::size_t c = pick(rng, 3, 4);
      auto block = ConvNeXtBlock::create(c, rng);
      ParameterList params;
      block.collect("", params);
      randomize(params, rng, 0.3);
      // Most 7x7 taps fall off these small maps; keep the norm's input O(1).
      rescale(params, "dw.kernel", 10.0);
      Tensor x = leaf(Shape{1, pick(rng, 3, 6), pick(rng, 3, 6), c}, rng);
      cases.push_back({case_name("convnext_block", i), leaves_with_input(x, params),
                       [=] { return block.forward(x); }});
    }
    {
      const std::size_t c = pick(rng, 3, 4);
      auto stem = Stem::create(3, c, rng);
      ParameterList params;
      stem.collect("", params);
      randomize(params, rng, 1.0);
      Tensor x = leaf(Shape{1, 4 * pick(rng, 1, 2), 4 * pick(rng, 1, 2), 3}, rng);
      cases.push_back({case_name("stem", i), leaves_with_input(x, params),
                       [=] { return stem.forward(x); }});
    }
    {
      const std::size_t c = pick(rng, 3, 4);
      auto ds = Downsample::create(c, 2 * c, rng);
      ParameterList params;
      ds.collect("", params);
      randomize(params, rng, 0.5);
      Tensor x = well_conditioned_rows(Shape{1, 2 * pick(rng, 1, 3), 2 * pick(rng, 1, 3), c}, rng);
      cases.push_back({case_name("downsample", i), leaves_with_input(x, params),
                       [=] { return ds.forward(x); }});
    }
    {
      const std::size_t d_in = pick(rng, 1, 4), d_q = pick(rng, 1, 4);
      auto head = SelfAttentionHead::create(d_in, d_q, rng);
      ParameterList params;
      head.collect("", params);
      randomize(params, rng, 1.0);
      Tensor x = leaf(Shape{pick(rng, 1, 2), pick(rng, 1, 5), d_in}, rng);
      cases.push_back({case_name("self_attention", i), leaves_with_input(x, params),
                       [=] { return head.forward(x); }});
    }
    {
      DetailExtractionConfig cfg;
      cfg.token_dim = pick(rng, 1, 2);
      cfg.channels = 2 * pick(rng, 2, 3);
      cfg.d_q = pick(rng, 1, 3);
      cfg.conv_layers = 1 + i % 3;
      cfg.dropout_p = 0.25;
      auto block = DetailExtractionBlock::create(cfg, rng);
      ParameterList params;
      block.collect("", params);
      randomize(params, rng, 0.5);
      Tensor x = well_conditioned_rows(Shape{pick(rng, 1, 2), 8 + 4 * (i % 2), 8, cfg.channels}, rng);
      const std::uint64_t mask_seed = rng.next_u64();
      cases.push_back({case_name("detail_extraction", i), leaves_with_input(x, params), [=] {
                         Rng mask_rng(mask_seed);
                         return block.forward(x, true, mask_rng);
                       }});
    }
  }
  return cases;
}

GradCheckCase model_gradcheck_case(std::uint64_t seed) {
  Rng rng(seed, 13);
  ConvCutConfig cfg = ConvCutConfig::tiny();
  const auto model = std::make_shared<ConvCutModel>(ConvCutModel::build(cfg, rng));
  // Layer scales start at 1e-6; lift them so block gradients are non-trivial.
  for (auto p : model->parameters()) {
    if (p.name.ends_with("layer_scale")) {
      for (float& v : p.value.mutable_data()) v = static_cast<float>(0.5 * rng.normal());
    }
  }
  const Tensor x = random_tensor(Shape{2, 64, 64, 3}, rng);
  std::vector<std::size_t> labels{rng.uniform_index(cfg.num_classes), rng.uniform_index(cfg.num_classes)};
  const std::uint64_t mask_seed = rng.next_u64();
  return {"model_tiny", model->parameters(), [=] {
            Rng mask_rng(mask_seed);
            return sparse_ce_loss(model->forward(x, true, mask_rng), labels);
          },
          true};
}

}  // namespace convcut
