#pragma once

// Define-by-run reverse-mode tape. Every forward op appends a node holding its
// output and a closure that maps the output gradient onto input gradients.
// backward() walks the nodes in exact reverse order; gradients accumulate
// additively, so a value consumed twice receives the sum of both branches.
//
// A tape and the Vars pointing into it belong to one thread.

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fanfreq/error.hpp"
#include "fanfreq/tensor.hpp"

namespace fanfreq {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& tensor() const;
  const Shape& shape() const { return tensor().shape; }
  const std::vector<double>& values() const { return tensor().values; }
  double item() const { return tensor().item(); }
  std::size_t numel() const { return tensor().numel(); }
};

class Tape {
 public:
  /// Receives the gradient of the node's output; pushes into inputs.
  using BackwardFn = std::function<void(Tape&, const std::vector<double>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor t) { return push(std::move(t), nullptr, false, {}, "constant"); }

  /// Tape-owned leaf that collects a gradient (inputs under test).
  Var leaf(Tensor t) { return push(std::move(t), nullptr, true, {}, "leaf"); }

  /// Leaf bound to externally owned storage; its gradient accumulates into
  /// `param.grad` (which is not cleared here).
  Var parameter(Tensor& param) {
    return push(Tensor{}, &param, param.requires_grad, {}, "parameter");
  }

  /// Appends an op output. The backward closure is kept only when some input
  /// needs a gradient. Non-finite outputs are rejected here.
  Var record(Tensor out, std::initializer_list<Var> inputs, BackwardFn backward,
             const char* op) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || node(v).needs_grad;
    require_finite(out.values, std::string(op) + " forward");
    return push(std::move(out), nullptr, needs, needs ? std::move(backward) : BackwardFn{}, op);
  }

  const Tensor& tensor(Var v) const { return node(v).value(); }

  bool needs_grad(Var v) const { return node(v).needs_grad; }

  /// Gradient buffer of `v`, allocated on first use; nullptr if `v` does not
  /// participate in differentiation.
  std::vector<double>* grad_sink(Var v) {
    Node& n = node(v);
    if (!n.needs_grad) return nullptr;
    return &n.value().ensure_grad();
  }

  /// Gradient accumulated on `v` so far (empty when none).
  const std::vector<double>& grad(Var v) const { return node(v).value().grad; }

  /// Seeds d(loss)/d(loss) = seed and runs every recorded closure in reverse.
  void backward(Var loss, double seed = 1.0) {
    check_owner(loss);
    if (tensor(loss).numel() != 1) {
      throw UsageError("backward() needs a scalar loss, got shape " +
                       shape_string(tensor(loss).shape));
    }
    if (!node(loss).needs_grad) return;
    auto& g = node(loss).value().ensure_grad();
    g[0] += seed;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.value().has_grad()) continue;
      require_finite(n.value().grad, std::string(n.op) + " backward");
      // Inputs always precede the op, so the closure never touches this buffer.
      const std::vector<double>& grad_out = n.value().grad;
      n.backward(*this, grad_out);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor local;
    Tensor* external = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
    const char* op = "";

    Tensor& value() { return external ? *external : local; }
    const Tensor& value() const { return external ? *external : local; }
  };

  Var push(Tensor t, Tensor* external, bool needs, BackwardFn fn, const char* op) {
    nodes_.push_back(Node{std::move(t), external, needs, std::move(fn), op});
    return Var{this, nodes_.size() - 1};
  }

  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw UsageError("Var does not belong to this tape");
    }
  }

  Node& node(Var v) {
    check_owner(v);
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    check_owner(v);
    return nodes_[v.id];
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::tensor() const {
  if (tape == nullptr) throw UsageError("Var is not attached to a tape");
  return tape->tensor(*this);
}

}  // namespace fanfreq
