#include "hydet/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace hydet {

namespace {
thread_local bool g_grad_enabled = true;
bool g_checked = false;
}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_checked_mode(bool on) { g_checked = on; }
bool checked_mode() { return g_checked; }

template <typename T>
void check_finite(std::span<const T> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " at flat index " << i << " in " << what;
      throw NumericError(os.str());
    }
  }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = hydet::numel(shape);
  return from_data(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value),
                   requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
  if (hydet::numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("shape " + to_string(shape) + " does not match " +
                     std::to_string(data.size()) + " elements");
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  }
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf) throw Error("mutable_data() is only available on leaf tensors");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  if (index.size() != node_->shape.size()) throw ShapeError("index rank mismatch");
  std::int64_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    const auto extent = node_->shape[i++];
    if (v < 0 || v >= extent) throw ShapeError("index out of range");
    flat = flat * extent + v;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw Error("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = on;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(node_->shape, node_->value, false);
}

template <typename T>
void Tensor<T>::backward(bool retain_graph) const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + to_string(shape()));
  }
  if (!node_->requires_grad) throw Error("backward() on a tensor that does not require grad");
  auto tape = Tape<T>::record(*this);
  tape.run(retain_graph);
}

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  std::unordered_set<detail::Node<T>*> visited;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  auto* start = root.node().get();
  stack.emplace_back(start, 0);
  visited.insert(start);
  tape.keep_alive_.push_back(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto& in = node->inputs[next++];
      if (in->requires_grad && visited.insert(in.get()).second) {
        tape.keep_alive_.push_back(in);
        stack.emplace_back(in.get(), 0);
      }
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void Tape<T>::run(bool retain_graph) {
  if (order_.empty()) return;
  auto* root = order_.back();
  auto& seed = root->grad_buffer();
  for (auto& g : seed) g += T(1);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    auto* node = *it;
    if (node->is_leaf || !node->backward || node->grad.empty()) continue;
    node->backward(node->grad);
    if (checked_mode()) {
      for (auto& in : node->inputs) {
        if (in->requires_grad && !in->grad.empty()) {
          check_finite<T>(in->grad, node->op);
        }
      }
    }
    if (!retain_graph) {
      node->backward = nullptr;
      node->inputs.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const std::vector<T>&)> backward) {
  if (checked_mode()) check_finite<T>(value, op);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  bool needs = false;
  if (grad_mode_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);
template Tensor<float> make_result<float>(const char*, Shape, std::vector<float>,
                                          std::vector<Tensor<float>>,
                                          std::function<void(const std::vector<float>&)>);
template Tensor<double> make_result<double>(const char*, Shape, std::vector<double>,
                                            std::vector<Tensor<double>>,
                                            std::function<void(const std::vector<double>&)>);

}  // namespace hydet
