#include "convcut/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "convcut/error.hpp"

namespace convcut {

namespace {
thread_local GradTape* g_current_tape = nullptr;
}

Shape::Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  if (dims_.empty() || dims_.size() > 4) {
    throw DimensionError("shape rank must be in 1..4, got " + std::to_string(dims_.size()));
  }
  for (std::size_t d : dims_) {
    if (d == 0) throw DimensionError("shape extents must be positive: " + str());
  }
}

std::size_t Shape::numel() const {
  if (dims_.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t d : dims_) n *= d;
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (i) os << 'x';
    os << dims_[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->shape = Shape{1};
  impl_->data.assign(1, 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (data.size() != shape.numel()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape.str());
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  impl_->tracked = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = shape.numel();
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{1}, {value}); }

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape().str());
  return impl_->data[0];
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(impl_->shape, impl_->data, requires_grad);
}

TapeScope::TapeScope(GradTape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }

TapeScope::~TapeScope() { g_current_tape = previous_; }

GradTape* current_tape() { return g_current_tape; }

Tensor record_op(std::string op, Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
                 BackwardRule rule) {
  Tensor out(std::move(shape), std::move(data));
  GradTape* tape = g_current_tape;
  if (tape == nullptr) return out;
  const bool any_tracked =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.tracked(); });
  if (!any_tracked) return out;
  out.impl_->tracked = true;
  tape->append({std::move(op), std::move(inputs), out, std::move(rule)});
  return out;
}

const Tensor* GradMap::find(const Tensor& t) const {
  auto it = grads_.find(t.id());
  return it == grads_.end() ? nullptr : &it->second;
}

GradMap backward(const Tensor& loss, const GradTape& tape) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + loss.shape().str());
  }
  GradMap result;
  if (!loss.tracked()) return result;

  std::unordered_map<const detail::TensorImpl*, std::vector<float>> acc;
  acc[loss.id()] = {1.0f};

  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto found = acc.find(it->output.id());
    if (found == acc.end()) continue;
    const std::vector<float>& grad_out = found->second;

    std::vector<std::span<float>> grad_in(it->inputs.size());
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const Tensor& in = it->inputs[i];
      if (!in.tracked()) continue;
      auto& buf = acc[in.id()];
      if (buf.empty()) buf.assign(in.numel(), 0.0f);
      grad_in[i] = buf;
    }
    it->rule.fn(grad_out, grad_in);
  }

  // Collect leaves in first-use order, plus every intermediate.
  std::unordered_map<const detail::TensorImpl*, bool> seen;
  auto emit = [&](const Tensor& t) {
    auto g = acc.find(t.id());
    if (g == acc.end() || seen[t.id()]) return;
    seen[t.id()] = true;
    result.grads_.emplace(t.id(), Tensor(t.shape(), g->second));
    if (t.requires_grad()) result.params_.push_back(t);
  };
  for (const auto& node : nodes) {
    for (const auto& in : node.inputs) emit(in);
    emit(node.output);
  }
  if (loss.requires_grad()) emit(loss);
  return result;
}

}  // namespace convcut
