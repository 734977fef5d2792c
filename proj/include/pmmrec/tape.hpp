#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pmmrec/tensor.hpp"

namespace pmmrec {

/// A named trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    grad.fill(0.0);
  }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive applications in execution order and replays them in
/// reverse to accumulate gradients.
///
/// Nodes are appended only, so every node's operands precede it. A tape built
/// with `record_gradients = false` keeps values only; it is what evaluation
/// paths use.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) { return push("constant", std::move(value), false); }

  /// Tracked leaf whose gradient can be read back with `grad()`.
  Var input(Tensor value) { return push("input", std::move(value), record_); }

  /// Leaf bound to a model parameter; gradients flow into `p.grad` on
  /// backward when the parameter is trainable.
  Var parameter(Parameter& p) {
    const bool tracked = record_ && p.trainable;
    Var v = push("parameter", p.value, tracked);
    if (tracked) nodes_[v.id()].param = &p;
    return v;
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id()); }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Var v) const { return needs_grad(v.id()); }

  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient of the last backward pass w.r.t. node `v` (zeros if the node
  /// did not influence the loss).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    return n.has_grad ? n.grad : Tensor(n.value.shape());
  }

  /// Appends a node produced by a primitive. `fn` is kept only when some
  /// operand requires a gradient.
  Var record(std::string_view op, Tensor value,
             std::initializer_list<Var> operands, BackwardFn fn) {
    bool any = false;
    for (const Var& o : operands) {
      check_owned(o, op);
      any = any || nodes_[o.id()].needs_grad;
    }
    Var v = push(op, std::move(value), record_ && any);
    if (record_ && any) nodes_[v.id()].backward = std::move(fn);
    return v;
  }

  /// Variant of `record` for primitives with a variable operand count.
  Var record_n(std::string_view op, Tensor value, const std::vector<Var>& operands,
               BackwardFn fn) {
    bool any = false;
    for (const Var& o : operands) {
      check_owned(o, op);
      any = any || nodes_[o.id()].needs_grad;
    }
    Var v = push(op, std::move(value), record_ && any);
    if (record_ && any) nodes_[v.id()].backward = std::move(fn);
    return v;
  }

  /// Reverse sweep from a scalar loss. Parameter gradients are added into
  /// their `grad` accumulators; callers zero them between steps.
  void backward(Var loss) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    check_owned(loss, "backward");
    const Node& terminal = nodes_[loss.id()];
    if (terminal.value.size() != 1) {
      throw ShapeError("backward requires a scalar terminal node; node " +
                       std::to_string(loss.id()) + " (" + terminal.op +
                       ") has shape " + shape_string(terminal.value.shape()));
    }
    visits_ = 0;
    if (!terminal.needs_grad) return;
    grad_buffer(loss.id()).fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      ++visits_;
      if (!n.has_grad) continue;
      // Closures only touch operand buffers, which precede node i.
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) {
        Tensor& acc = n.param->grad;
        if (acc.shape() != n.value.shape()) acc = Tensor(n.value.shape());
        auto src = n.grad.values();
        auto dst = acc.values();
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
      }
    }
  }

  /// Nodes visited by the most recent backward sweep.
  std::size_t backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(std::string_view op, Tensor value, bool needs_grad) {
    Node n;
    n.op = std::string(op);
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(const Var& v, std::string_view op) const {
    if (&v.tape() != this || v.id() >= nodes_.size()) {
      throw std::invalid_argument(std::string(op) +
                                  ": operand belongs to a different tape");
    }
  }

  bool record_;
  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

}  // namespace pmmrec
