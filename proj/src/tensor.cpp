#include "tensor.hpp"

#include <sstream>
#include <unordered_set>
#include <utility>

#include "error.hpp"

namespace vidistill {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (vidistill::numel(shape) != values.size()) {
    usage_error("tensor shape ", shape_str(shape), " holds ", vidistill::numel(shape),
                " values but ", values.size(), " were given");
  }
  for (auto d : shape) {
    if (d == 0) usage_error("tensor shape ", shape_str(shape), " has a zero dimension");
  }
  node_ = std::make_shared<Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = vidistill::numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  if (!node_) usage_error("use of an undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) usage_error("axis ", axis, " out of range for shape ", shape_str(s));
  return s[axis];
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  if (!node_) usage_error("use of an undefined tensor");
  return node_->value;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (!node_) usage_error("use of an undefined tensor");
  return node_->value;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) usage_error("item() on a tensor of shape ", shape_str(shape()));
  return node_->value[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  if (!node_) usage_error("use of an undefined tensor");
  if (!node_->is_leaf) usage_error("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = flag;
}

template <typename T>
bool BasicTensor<T>::is_leaf() const {
  return node_ && node_->is_leaf;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!has_grad()) usage_error("tensor has no gradient");
  return node_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  if (!has_grad()) usage_error("tensor has no gradient");
  return node_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (!node_) usage_error("backward() on an undefined tensor");
  if (node_->value.size() != 1) {
    usage_error("backward() requires a scalar loss, got shape ", shape_str(node_->shape));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->pass_grad.clear();
  node_->pass_grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->pass_grad.empty()) n->backward_fn(*n);
  }
  for (auto* n : order) {
    if (n->pass_grad.empty()) continue;
    if (n->is_leaf) {
      if (n->grad.empty()) {
        n->grad = std::move(n->pass_grad);
      } else {
        for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->pass_grad[i];
      }
    } else {
      n->grad = std::move(n->pass_grad);
    }
    n->pass_grad = {};
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), node_->value, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_node(NodePtr node) {
  BasicTensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value,
                           std::vector<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<float> make_result(Shape, std::vector<float>, std::vector<BasicTensor<float>>,
                                        std::function<void(Node<float>&)>);
template BasicTensor<double> make_result(Shape, std::vector<double>,
                                         std::vector<BasicTensor<double>>,
                                         std::function<void(Node<double>&)>);

}  // namespace vidistill
