#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace retr {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// One recorded operation. Inputs are held by shared ownership so saved
/// values stay alive until the node itself is released; the graph is acyclic
/// because a node can only reference nodes that existed before it.
template <typename T>
struct TapeNode {
  std::string op;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(TapeNode&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor participating in reverse-mode differentiation.
///
/// A Tensor is a cheap handle; copies share the same node. Values are fixed
/// after construction, with one exception: leaves may be updated in place
/// through mutable_data() by an optimizer between steps.
template <typename T>
class Tensor {
 public:
  using Node = TapeNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data();
  T item() const;

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// A new leaf holding a copy of the values, cut off from the tape.
  Tensor detach() const;

  /// Reverse pass from a scalar root. Leaf gradients accumulate across calls;
  /// interior gradients are recomputed from scratch every call.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an op result. When no input requires a gradient the backward rule
/// and input references are dropped, so inference builds no tape.
template <typename T>
Tensor<T> make_op_result(std::string op, Shape shape, std::vector<T> value,
                         std::vector<Tensor<T>> inputs,
                         std::function<void(TapeNode<T>&)> backward);

}  // namespace retr
