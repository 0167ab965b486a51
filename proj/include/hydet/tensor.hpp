#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hydet/error.hpp"

namespace hydet {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Gradient recording is on by default; NoGradGuard disables it for the
/// current thread (inference, evaluation, optimizer updates).
bool grad_mode_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Checked mode validates every op output and every propagated gradient
/// for NaN/Inf and throws NumericError on the first offender.
void set_checked_mode(bool on);
bool checked_mode();

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads the node's output gradient and accumulates into its inputs.
  std::function<void(const std::vector<T>&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tape;

/// Dense row-major tensor with optional participation in reverse-mode
/// differentiation. A Tensor is a cheap handle; copies share the node.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int axis) const;
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  // Direct mutation is reserved for leaves (parameter init, optimizer step).
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  bool is_leaf() const { return node_->is_leaf; }
  const char* op_name() const { return node_->op; }

  /// New leaf sharing no history with this tensor.
  Tensor detach() const;

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls
  /// until zero_grad(); the graph is released unless retain_graph is set.
  void backward(bool retain_graph = false) const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Topologically ordered record of the ops reachable from a root tensor.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root);

  std::span<detail::Node<T>* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

  /// Seeds the root gradient with one and runs every backward closure once,
  /// in reverse topological order.
  void run(bool retain_graph);

 private:
  std::vector<detail::Node<T>*> order_;  // inputs before consumers
  std::vector<std::shared_ptr<detail::Node<T>>> keep_alive_;
};

/// Builds a non-leaf result. `backward` is invoked with the output gradient
/// and must accumulate into the inputs that require grad. The node only
/// records history when grad mode is on and some input requires grad.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const std::vector<T>&)> backward);

/// Throws NumericError naming `what` if any element is non-finite.
template <typename T>
void check_finite(std::span<const T> values, const char* what);

}  // namespace hydet
