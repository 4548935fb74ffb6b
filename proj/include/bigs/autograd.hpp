// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "bigs/tensor.hpp"

namespace bigs {

/// A named trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;  // AdamW weight decay applies

  Parameter(std::string n, Tensor v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)), decay(wd) {}
  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order of the (acyclic) graph; backward() walks it once in
/// reverse. Parameter leaves accumulate into Parameter::grad.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(Parameter& p);

  /// Appends an op result. `fn` runs during backward if any input needs a
  /// gradient; it reads grad(output) and accumulates into grad(inputs).
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  /// Gradient buffer, zero-allocated on first access.
  Tensor& grad(Var v);
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Throws if loss is not scalar.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    BackwardFn backward;
    bool needs_grad = false;
  };
  void check(Var v) const;

  bool record_;
  std::deque<Node> nodes_;  // stable references across appends
};

}  // namespace bigs
