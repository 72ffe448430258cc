#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "lada/tensor.hpp"

namespace lada {

template <class T>
class Tape;

/// Handle to a tensor recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Dims& dims() const { return value().dims(); }
  bool valid() const noexcept { return tape != nullptr && id >= 0; }
};

/// Reverse-mode tape. Records are appended in application order and the
/// reverse sweep visits them in strict reverse order, each exactly once.
/// A tape and its values belong to one thread.
template <class T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  /// Receives the upstream gradient and the record's own value; accumulates
  /// into the parents' gradient buffers.
  using BackwardFn = std::function<void(Tape&, const TensorT& grad_out, const TensorT& value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(TensorT value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> constant(TensorT value) { return leaf(std::move(value), false); }

  /// Appends a primitive application. `parents` decides whether the result
  /// needs a gradient; the closure is dropped when none of them do.
  Var<T> record(TensorT value, std::initializer_list<Var<T>> parents, BackwardFn backward) {
    bool needs = false;
    for (const auto& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> record(TensorT value, const std::vector<Var<T>>& parents, BackwardFn backward) {
    bool needs = false;
    for (const auto& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const TensorT& value(Var<T> v) const {
    check_owner(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var<T> v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }

  /// Gradient buffer for accumulation; nullptr when the record needs none.
  T* grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = TensorT(n.value.dims());
    return n.grad.data();
  }

  /// Gradient of the last backward() root w.r.t. `v`; zeros if `v` did not contribute.
  TensorT grad(Var<T> v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return TensorT(n.value.dims());
    return n.grad;
  }

  void backward(Var<T> root) {
    if (root.tape != this || root.id < 0 || root.id >= static_cast<int>(nodes_.size())) {
      throw ValidationError("backward: root was not produced by this tape");
    }
    if (!nodes_[root.id].value.is_scalar()) {
      throw ValidationError("backward: root must be a scalar, got " + dims_to_string(nodes_[root.id].value.dims()));
    }
    for (auto& n : nodes_) n.grad = TensorT();
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad = TensorT(nodes_[root.id].value.dims(), T(1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad, n.value);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Smallest |pre-activation| seen at a piecewise-linear kink on this tape.
  double kink_margin() const noexcept { return kink_margin_; }
  void note_kink_distance(double d) noexcept { kink_margin_ = std::min(kink_margin_, d); }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check_owner(Var<T> v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw ValidationError("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

}  // namespace lada
