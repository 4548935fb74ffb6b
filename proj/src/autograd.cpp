// SPDX-License-Identifier: Apache-2.0
#include "bigs/autograd.hpp"

#include <stdexcept>

namespace bigs {

const Tensor& Var::value() const { return tape_->value(*this); }

void Tape::check(Var v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) throw std::invalid_argument("Var does not belong to this tape");
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& in : inputs) {
      check(in);
      if (nodes_[in.id()].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id()].value;
}

Tensor& Tape::grad(Var v) {
  check(v);
  Node& n = nodes_[v.id()];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

void Tape::backward(Var loss) {
  check(loss);
  if (!record_) throw std::logic_error("backward on a non-recording tape");
  if (value(loss).numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_str(value(loss).shape()));
  }
  grad(loss)[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) {
      n.backward(*this, Var(this, i));
    } else if (n.param != nullptr) {
      auto& dst = n.param->grad.storage();
      const auto& src = n.grad.storage();
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
  }
}

}  // namespace bigs
