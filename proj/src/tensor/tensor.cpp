#include "retr/tensor.hpp"

#include <sstream>
#include <unordered_set>
#include <utility>

namespace retr {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
  std::vector<T> values(shape_numel(shape), fill);
  return from(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf()) throw ContractError("mutable_data() on non-leaf tensor (" + node_->op + ")");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  }
  return node_->value[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->value, false);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar root, got shape " + shape_to_string(shape()));
  }
  if (!node_->requires_grad) {
    throw ContractError("backward() root is not on the tape");
  }

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<const Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf()) continue;
    for (auto& in : n->inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    n->backward(*n);
  }
}

template <typename T>
Tensor<T> make_op_result(std::string op, Shape shape, std::vector<T> value,
                         std::vector<Tensor<T>> inputs,
                         std::function<void(TapeNode<T>&)> backward) {
  auto node = std::make_shared<TapeNode<T>>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_op_result(std::string, Shape, std::vector<float>,
                                      std::vector<Tensor<float>>,
                                      std::function<void(TapeNode<float>&)>);
template Tensor<double> make_op_result(std::string, Shape, std::vector<double>,
                                       std::vector<Tensor<double>>,
                                       std::function<void(TapeNode<double>&)>);

}  // namespace retr
