#include "flowreg/tensor.hpp"

#include <sstream>
#include <unordered_set>
#include <utility>

namespace flowreg {

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  set_requires_grad(requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(1), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> data,
                                 const std::vector<Tensor>& inputs, BackwardFn backward,
                                 const char* op) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) {
      if (in.defined() && in.node_->requires_grad) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_);
  }
  return Tensor(std::move(node));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->shape;
}

template <typename T>
std::int64_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::int64_t Tensor<T>::numel() const {
  return static_cast<std::int64_t>(node_ ? node_->data.size() : 0);
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->data;
}

template <typename T>
std::span<T> Tensor<T>::data_mut() {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!node_ || !node_->requires_grad) return {};
  return node_->grad_buffer();
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
  if (!node_ || !node_->requires_grad) return {};
  return node_->grad_buffer();
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!node_) throw GraphError("use of undefined tensor");
  if (!is_leaf()) throw GraphError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = flag;
  if (flag) {
    node_->grad_buffer();
  } else {
    node_->grad.clear();
  }
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return node_ && !node_->backward;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_ && node_->requires_grad) node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape(), node_->data, requires_grad() && is_leaf());
}

template <typename T>
void Tensor<T>::backward() const {
  if (!node_) throw GraphError("backward() on undefined tensor");
  if (node_->data.size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(node_->shape));
  }
  if (!node_->requires_grad) {
    throw GraphError("backward() on a tensor with no recorded graph");
  }

  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  // Iterative post-order DFS: inputs are emitted before their consumers.
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [current, next] = stack.back();
    if (next < current->inputs.size()) {
      NodeT* child = current->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(current);
      stack.pop_back();
    }
  }

  for (NodeT* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), T(0));
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward) n->backward(*n);
  }
  for (NodeT* n : order) {
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace flowreg
