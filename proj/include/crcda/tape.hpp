#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "crcda/error.hpp"
#include "crcda/tensor.hpp"

namespace crcda {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  std::size_t size() const { return tape->value(id).size(); }
  bool needs_grad() const { return tape->needs_grad(id); }
};

/// Linear record of a forward computation, replayed in reverse by backward().
///
/// Every recorded op owns its output value; parameters are referenced, not
/// copied, and receive their gradient through Tensor::accumulate_grad so that
/// repeated backward passes add up until the caller zeroes them.
template <class T>
class Tape {
 public:
  /// Called with the accumulated output gradient; adds into input gradients.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf referencing an external parameter. The tensor must outlive backward().
  Var<T> param(Tensor<T>& p) {
    Node node;
    node.param = &p;
    node.needs_grad = p.requires_grad();
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  Var<T> push(Tensor<T> value, bool needs_grad, BackwardFn fn) {
    require(!consumed_, "tape already consumed by backward()");
    Node node;
    node.owned = std::move(value);
    node.needs_grad = needs_grad && fn != nullptr;
    node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.param ? *n.param : n.owned;
  }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Gradient buffer of a recorded value, allocated zeroed on first touch.
  std::vector<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Reverse sweep from a [1]-shaped loss. A tape supports exactly one sweep.
  void backward(Var<T> loss) {
    require(loss.tape == this, "loss was recorded on a different tape");
    if (consumed_) throw ContractViolation("tape already consumed by backward()");
    const Shape& s = value(loss.id).shape();
    require(s.size() == 1 && s[0] == 1, "backward() needs a scalar loss of shape [1], got " + shape_str(s));
    consumed_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    grad(loss.id)[0] = T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.param) {
        n.param->accumulate_grad(n.grad);
      } else if (n.backward) {
        n.backward(*this, std::span<const T>(n.grad));
      }
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace crcda
