// SPDX-License-Identifier: Apache-2.0
#include "mlkd/autograd.hpp"

#include "mlkd/error.hpp"

namespace mlkd {

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> parents, Backward backward) {
  if (!value.all_finite()) {
    fail(ErrorKind::numeric, std::string("non-finite value produced by ") + op);
  }
  bool needs_grad = false;
  for (const Var& p : parents) {
    if (p.tape_ != this) fail(ErrorKind::contract, std::string(op) + ": operand from another tape");
    needs_grad = needs_grad || nodes_[p.id_].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs_grad, needs_grad ? std::move(backward) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root) {
  if (consumed_) fail(ErrorKind::contract, "tape already consumed by a backward pass");
  if (root.tape_ != this) fail(ErrorKind::contract, "backward root belongs to another tape");
  if (value(root).size() != 1) {
    fail(ErrorKind::contract, "backward requires a scalar output, got " + shape_string(value(root).shape()));
  }
  consumed_ = true;
  if (!nodes_[root.id_].requires_grad) return;
  nodes_[root.id_].grad = Tensor::filled(nodes_[root.id_].value.shape(), 1.0);
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.backward && !node.grad.empty()) {
      node.backward(*this, node.grad);
      if (!node.grad.all_finite()) fail(ErrorKind::numeric, "non-finite gradient during backward pass");
    }
  }
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[v.id_];
  if (node.grad.empty()) return Tensor::zeros(node.value.shape());
  return node.grad;
}

Tensor* Tape::grad_slot(Var v) {
  Node& node = nodes_[v.id_];
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty()) node.grad = Tensor::zeros(node.value.shape());
  return &node.grad;
}

}  // namespace mlkd
