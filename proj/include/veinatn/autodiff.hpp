// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "veinatn/tensor.hpp"

namespace veinatn {

template <typename T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid while the
// tape is alive.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
};

// Reverse-mode tape. Nodes are appended in execution order, so the node
// list is already a topological order of the graph. Every recorded value
// is checked for NaN/Inf.
template <typename T>
class Tape {
 public:
  // Receives the tape and the id of the node being differentiated; reads
  // grad(self) and accumulates into the inputs' gradients.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> record(std::string_view op, Tensor<T> value, const std::vector<std::size_t>& inputs,
                BackwardFn backward);

  // Accumulates d(loss)/d(node) into every node that requires grad.
  // The loss must be a single-element value recorded on this tape.
  void backward(Var<T> loss);

  const Tensor<T>& value(Var<T> v) const { return check(v).value; }
  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var<T> v) const { return check(v).requires_grad; }

  // Gradient of the last backward pass; zeros when the node received none.
  Tensor<T> grad(Var<T> v) const;

  // Gradient buffer of a node during backward (allocated on first use).
  AlignedVector<T>& grad_buffer(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool backward_done() const noexcept { return backward_done_; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    AlignedVector<T> grad;
  };

  const Node& check(Var<T> v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace veinatn
