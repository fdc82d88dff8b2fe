#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace relay {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename Scalar>
struct ScalarTraits;

template <>
struct ScalarTraits<float> {
  static constexpr DType dtype = DType::f32;
  static constexpr const char* name = "f32";
};

template <>
struct ScalarTraits<double> {
  static constexpr DType dtype = DType::f64;
  static constexpr const char* name = "f64";
};

/// Raised when tensor extents are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward op produces NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an API precondition is violated (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into the grads of `inputs`.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::span<Scalar> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), Scalar(0));
    return grad;
  }
};

inline thread_local bool grad_enabled = true;
inline thread_local std::uint64_t* mac_sink = nullptr;

}  // namespace detail

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Counts multiply-accumulates executed by forward ops while in scope.
/// Scopes nest; an inner counter does not report to the outer one.
class MacCounter {
 public:
  MacCounter() : previous_(detail::mac_sink) { detail::mac_sink = &count_; }
  ~MacCounter() { detail::mac_sink = previous_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t macs() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

inline void count_macs(std::uint64_t n) {
  if (detail::mac_sink) *detail::mac_sink += n;
}

/// Dense row-major tensor with an optional reverse-mode tape.
///
/// A Tensor is a handle: copies share the same storage and graph node, the
/// way framework tensors do. Use detach() for an independent copy.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using NodeType = detail::Node<Scalar>;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    node_->value.assign(numel(shape), Scalar(0));
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar v) {
    std::vector<Scalar> values(numel(shape), v);
    return Tensor(std::move(shape), std::move(values));
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

  static Tensor from_node(std::shared_ptr<NodeType> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  DType dtype() const { return ScalarTraits<Scalar>::dtype; }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  /// Extent along `axis`; negative axes count from the back.
  std::size_t dim(int axis) const {
    const int n = static_cast<int>(ndim());
    const int a = axis < 0 ? axis + n : axis;
    if (a < 0 || a >= n) throw ShapeError("dim: axis out of range for " + to_string(shape()));
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const Scalar> data() const { return node_->value; }
  std::span<Scalar> mutable_data() { return node_->value; }

  Scalar item() const {
    if (size() != 1) throw ContractError("item: tensor has " + std::to_string(size()) + " elements");
    return node_->value[0];
  }

  Scalar operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw ContractError("set_requires_grad: only valid on leaves");
    node_->requires_grad = on;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const Scalar> grad() const { return node_->grad; }
  std::span<Scalar> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), Scalar(0)); }

  /// Independent copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  /// Reverse sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  const std::shared_ptr<NodeType>& node() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (!defined() || size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (defined() ? to_string(shape()) : std::string("<undefined>")));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS over the recorded graph.
  std::vector<NodeType*> order;
  std::unordered_set<NodeType*> seen;
  std::vector<std::pair<NodeType*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeType* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeType* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), Scalar(0));
  }
  node_->grad_buffer()[0] += Scalar(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeType* node = *it;
    if (node->is_leaf()) continue;
    node->backward(*node);
    std::vector<Scalar>().swap(node->grad);
  }
}

}  // namespace relay
