#pragma once

// Dense row-major tensors with define-by-run reverse-mode autodiff.
//
// A BasicTensor is a cheap shared handle to a graph node. Every operation
// in ops.hpp produces a fresh node holding its value and, when gradients are
// being recorded, references to its inputs plus a backward rule. Values are
// never mutated after creation except for leaf tensors (parameters and
// buffers), which the optimizer and BatchNorm update in place.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vidistill {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  // Leaves: accumulated across backward calls. Interior nodes: the gradient
  // of the most recent backward pass.
  std::vector<T> grad;
  // Scratch buffer for the backward pass in flight.
  std::vector<T> pass_grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  // Returns the pass gradient buffer, zero-allocating it on first use.
  std::vector<T>& pass_grad_buffer() {
    if (pass_grad.empty()) pass_grad.assign(value.size(), T(0));
    return pass_grad;
  }
};

// Gradient recording is on by default; NoGradGuard disables it for the
// current thread (teacher inference, evaluation, gradient checks).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data().size(); }

  std::span<const T> data() const;
  // Only meaningful on leaves; interior values are immutable by contract.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  // Reverse pass from this scalar. Leaf gradients accumulate; a pass is
  // accumulated into scratch first so that two calls add bitwise-identical
  // contributions.
  void backward() const;

  // New leaf holding a copy of the value, detached from the graph.
  BasicTensor detach() const;

  const NodePtr& node() const noexcept { return node_; }
  static BasicTensor from_node(NodePtr node);

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;

// Builds an operation result. When gradient recording is enabled and any
// input requires grad, the result joins the graph with the given rule.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value,
                           std::vector<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward_fn);

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace vidistill
