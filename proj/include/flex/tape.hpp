#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "flex/tensor.hpp"

namespace flex {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. Every non-leaf node keeps the closure that produced its
/// value; replay() re-runs those closures in order, which is what the
/// finite-difference oracle uses after perturbing a leaf.
template <class T>
class Tape {
 public:
  using Forward = std::function<void(Tape&, std::size_t)>;
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<std::size_t> inputs;
    Forward forward;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op node and evaluates it immediately.
  Var record(std::vector<Var> inputs, Forward forward, Backward backward) {
    Node n;
    n.inputs.reserve(inputs.size());
    for (Var v : inputs) {
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_.at(v.id).requires_grad;
    }
    n.forward = std::move(forward);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    const std::size_t id = nodes_.size() - 1;
    nodes_[id].forward(*this, id);
    return Var{id};
  }

  std::size_t size() const { return nodes_.size(); }
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  Tensor<T>& mutable_value(std::size_t id) { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of a node after backward(); nullptr when nothing reached it.
  const Tensor<T>* grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.has_grad ? &n.grad : nullptr;
  }

  /// Accumulation buffer for node `id`, zero-initialized on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
  }

  /// Reverse sweep from a scalar node.
  void backward(Var seed) {
    const Node& s = nodes_.at(seed.id);
    require(s.value.size() == 1, ErrorKind::Usage,
            "backward seed must be scalar, got shape " + shape_str(s.value.shape()));
    zero_grad();
    grad_buffer(seed.id)[0] = T{1};
    for (std::size_t id = seed.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.has_grad && n.requires_grad && n.backward) n.backward(*this, id);
    }
  }

  /// Re-evaluates every op node in recorded order.
  void replay() {
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].forward) nodes_[id].forward(*this, id);
    }
  }

  void set_leaf(Var v, Tensor<T> value) {
    Node& n = nodes_.at(v.id);
    require(!n.forward, ErrorKind::Usage, "set_leaf on a non-leaf node");
    require_same_shape(n.value, value, "set_leaf");
    n.value = std::move(value);
  }

 private:
  std::vector<Node> nodes_;
};

}  // namespace flex
