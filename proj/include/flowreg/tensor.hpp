#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations on tensors that
// require gradients record a node holding their inputs and a backward
// closure; calling backward() on a scalar result walks the recorded graph in
// reverse topological order and accumulates gradients into the leaves.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowreg {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Per-thread switch for graph recording. Disabled inside NoGradGuard scopes.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of its inputs.
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;
  using BackwardFn = std::function<void(detail::Node<T>&)>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  // Builds an op result. Records the graph only when grad mode is on and at
  // least one input requires gradients.
  static Tensor make_result(Shape shape, std::vector<T> data,
                            const std::vector<Tensor>& inputs, BackwardFn backward,
                            const char* op);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t dim(std::size_t axis) const;
  std::int64_t numel() const;

  std::span<const T> data() const;
  // Mutable access to the value buffer. Intended for leaves (parameters,
  // inputs); mutating an interior node invalidates its recorded backward.
  std::span<T> data_mut();
  T item() const;

  // Empty span when the tensor does not track gradients.
  std::span<const T> grad() const;
  std::span<T> grad_mut();

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  // Accumulates d(this)/d(leaf) into every reachable leaf. Requires a scalar
  // tensor that tracks gradients.
  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace flowreg
