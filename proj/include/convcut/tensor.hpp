#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace convcut {

// Ordered extents, rank 1..4. Image tensors are channels-last (B, H, W, C).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(std::vector<std::size_t> dims);

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t back() const { return dims_.back(); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t numel() const;

  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<std::size_t> dims_;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  // True for requires_grad leaves and for outputs recorded on a tape.
  bool tracked = false;
};
}  // namespace detail

struct BackwardRule;

// Handle to an immutable f32 array. Copies share storage; use clone() for a
// deep copy. Only optimizers and loaders write through mutable_data().
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value);

  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }
  std::span<const float> data() const { return impl_->data; }
  std::span<float> mutable_data() { return impl_->data; }
  float item() const;
  float operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  bool tracked() const { return impl_->tracked; }

  Tensor clone(bool requires_grad = false) const;
  Tensor detach() const { return clone(false); }

  const detail::TensorImpl* id() const { return impl_.get(); }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend Tensor record_op(std::string op, Shape shape, std::vector<float> data,
                          std::vector<Tensor> inputs, BackwardRule rule);
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Local derivative of one recorded operation: given dL/d(output), add
// dL/d(input_i) into grad_in[i]. Spans for inputs that are not tracked are
// empty and must be skipped.
struct BackwardRule {
  std::function<void(std::span<const float> grad_out, std::span<std::span<float>> grad_in)> fn;
};

// Append-only record of operations executed while the tape is active.
// Nodes are stored in execution order, which is a topological order.
class GradTape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardRule rule;
  };

  void append(Node node) { nodes_.push_back(std::move(node)); }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// Makes a tape current for this thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

GradTape* current_tape();

// Creates an op result and, when a tape is current and any input is tracked,
// records the node so backward() can reach the inputs.
Tensor record_op(std::string op, Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
                 BackwardRule rule);

// Gradients produced by backward(). parameters() lists requires_grad leaves
// in first-use order; find() also answers for recorded intermediates.
class GradMap {
 public:
  const Tensor* find(const Tensor& t) const;
  const std::vector<Tensor>& parameters() const { return params_; }
  bool empty() const { return params_.empty(); }
  std::size_t size() const { return params_.size(); }

 private:
  friend GradMap backward(const Tensor& loss, const GradTape& tape);
  std::unordered_map<const detail::TensorImpl*, Tensor> grads_;
  std::vector<Tensor> params_;
};

// Reverse sweep over the tape from a scalar loss. Throws ContractError when
// the loss has more than one element. A loss that was never recorded yields
// an empty map.
GradMap backward(const Tensor& loss, const GradTape& tape);

}  // namespace convcut
