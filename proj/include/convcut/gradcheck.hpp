#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "convcut/layers.hpp"
#include "convcut/tensor.hpp"

namespace convcut {

struct GradCheckOptions {
  double step = 1e-3;
  // Per element: |g - g_fd| <= tolerance * max(1, |g|, |g_fd|).
  double tolerance = 1e-3;
  std::size_t max_elements = 32;  // sampled per leaf tensor
  std::uint64_t seed = 1;
};

// A function of a set of requires_grad leaves. output() is re-evaluated with
// perturbed leaf values, so it must be deterministic (any randomness has to
// be re-seeded inside). Unless scalar_loss is set, the output is contracted
// with fixed random weights; the finite-difference side does that
// contraction in double so f32 rounding of a large sum does not swamp it.
struct GradCheckCase {
  std::string name;
  ParameterList leaves;
  std::function<Tensor()> output;
  bool scalar_loss = false;
};

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;  // scaled error as defined in GradCheckOptions
  std::string worst_leaf;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = true;
};

GradCheckResult check_gradients(const GradCheckCase& c, const GradCheckOptions& opts);

// `instances` random small-shape cases for every differentiable op and every
// layer, named "<op>#<i>".
std::vector<GradCheckCase> op_gradcheck_cases(std::uint64_t seed, std::size_t instances);
std::vector<GradCheckCase> block_gradcheck_cases(std::uint64_t seed, std::size_t instances);

// Tiny-profile model with sparse CE on a random 2x64x64x3 batch, training
// mode with a fixed dropout draw.
GradCheckCase model_gradcheck_case(std::uint64_t seed);

// Case name without the "#<i>" instance suffix.
std::string gradcheck_group(const std::string& case_name);

}  // namespace convcut
