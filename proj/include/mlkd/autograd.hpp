// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>

#include "mlkd/tensor.hpp"

namespace mlkd {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. Nodes are appended in evaluation order, so a
/// reverse sweep visits every node after all of its consumers. A tape is
/// single use: backward() may run once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  /// Records the result of an operation. Throws a numeric error naming `op`
  /// when the value is not finite. The backward closure is dropped when no
  /// parent requires a gradient.
  Var record(const char* op, Tensor value, std::initializer_list<Var> parents, Backward backward);

  void backward(Var root);

  /// Gradient accumulated for `v`; zeros when nothing flowed into it.
  Tensor grad(Var v) const;

  /// Accumulation buffer for `v`, or nullptr when `v` carries no gradient.
  Tensor* grad_slot(Var v);

  const Tensor& value(Var v) const { return nodes_[v.id_].value; }
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace mlkd
