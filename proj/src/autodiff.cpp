// SPDX-License-Identifier: Apache-2.0

#include "veinatn/autodiff.hpp"

#include <numeric>
#include <sstream>

namespace veinatn {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

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

template <typename T>
const typename Tape<T>::Node& Tape<T>::check(Var<T> v) const {
  if (v.tape != this) throw TapeError("variable belongs to a different tape");
  return nodes_.at(v.id);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("non-finite value in leaf tensor");
  Node node;
  node.op = "leaf";
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  backward_done_ = false;
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, const std::vector<std::size_t>& inputs,
                       BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError("non-finite output from op '" + std::string(op) + "'");
  }
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  node.inputs = inputs;
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) throw TapeError("op input recorded after its consumer");
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  backward_done_ = false;
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
AlignedVector<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = check(v);
  if (n.grad.empty()) return Tensor<T>(n.value.shape(), T{0});
  return Tensor<T>(n.value.shape(), n.grad);
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  const Node& root = check(loss);
  if (backward_done_) throw TapeError("backward called twice without a new forward pass");
  if (root.value.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_to_string(root.value.shape()));
  }
  for (Node& n : nodes_) n.grad.clear();
  backward_done_ = true;
  if (!root.requires_grad) return;
  grad_buffer(loss.id)[0] = T{1};
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace veinatn
