#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every primitive in evaluation order; backward() walks the
// record once in reverse and accumulates gradients into the leaves. Tapes are
// single-threaded and rebuilt for every mini-batch.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "flowvi/tensor.hpp"

namespace flowvi {

class Tape;
using NodeId = std::uint32_t;

/// Handle to a node of a Tape. Valid only for the Tape that created it.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  NodeId id() const noexcept { return id_; }
  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// View handed to a primitive's backward rule.
class BackwardContext {
 public:
  BackwardContext(Tape& tape, NodeId self) : tape_(tape), self_(self) {}
  const Tensor& output() const;
  const Tensor& input(std::size_t k) const;
  bool wants(std::size_t k) const;
  void accumulate(std::size_t k, const Tensor& grad);

 private:
  Tape& tape_;
  NodeId self_;
};

using BackwardRule = std::function<void(const Tensor& upstream, BackwardContext& ctx)>;

/// Gradients of a scalar root with respect to every node that needed one.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  /// Gradient for `v`; zeros of v's shape if v did not influence the root.
  const Tensor& of(const Var& v) const;

 private:
  std::vector<Tensor> grads_;
  friend class Tape;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives a gradient.
  Var parameter(Tensor value);
  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  Var constant(double value) { return constant(Tensor::scalar(value)); }

  /// Record a primitive. `rule` may be empty when no input needs a gradient.
  Var record(Tensor value, std::vector<NodeId> inputs, BackwardRule rule);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool needs_grad(NodeId id) const { return nodes_[id].needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of a scalar-shaped root w.r.t. all nodes. Visits each node once.
  Gradients backward(const Var& root);

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> inputs;
    BackwardRule rule;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor>* active_grads_ = nullptr;
  std::vector<bool>* active_touched_ = nullptr;

  friend class BackwardContext;
};

void require_same_tape(const Var& a, const Var& b);

// ---- primitives -----------------------------------------------------------
// Elementwise binaries accept equal shapes or one scalar operand.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add(const Var& a, double c);
Var mul(const Var& a, double c);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator+(const Var& a, double c);
Var operator+(double c, const Var& a);
Var operator-(const Var& a, double c);
Var operator-(double c, const Var& a);
Var operator*(const Var& a, double c);
Var operator*(double c, const Var& a);
Var operator/(const Var& a, double c);

Var exp(const Var& a);
Var log(const Var& a);
Var log1p(const Var& a);
Var atan(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var abs(const Var& a);
Var sign(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var pow(const Var& a, double exponent);
/// max(a, c) elementwise; ties go to `a`.
Var max(const Var& a, double c);
/// min(a, c) elementwise; ties go to `a`.
Var min(const Var& a, double c);
/// log Γ(x) elementwise; derivative is digamma.
Var log_gamma(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
Var logsumexp(const Var& a);

/// Matrix-matrix (m×k · k×n) or matrix-vector (m×k · k) product.
Var matmul(const Var& a, const Var& b);

// ---- batch-shaped helpers (rows are samples) ---------------------------------
/// (b×k) -> (b): per-row sum.
Var sum_rows(const Var& a);
/// (b×k) -> (b): per-row max-stabilised log-sum-exp.
Var logsumexp_rows(const Var& a);
/// (b×k) op (k): broadcast a row vector over every row.
Var add_row(const Var& m, const Var& row);
Var mul_row(const Var& m, const Var& row);
/// (b×k) op (b): broadcast a column vector over every column.
Var add_col(const Var& m, const Var& col);
Var mul_col(const Var& m, const Var& col);
/// Gather the listed columns of a (b×d) matrix.
Var select_cols(const Var& m, std::span<const std::size_t> cols);
/// Single column j of a (b×d) matrix as a length-b vector.
Var column(const Var& m, std::size_t j);
/// Inverse of a column split: place `a` at cols_a and `b` at cols_b of a (rows×d) result.
Var merge_cols(const Var& a, std::span<const std::size_t> cols_a, const Var& b,
               std::span<const std::size_t> cols_b, std::size_t d);
/// Stack length-b vectors as the columns of a (b×k) matrix.
Var stack_cols(std::span<const Var> cols);

/// Same value, no gradient flows to any ancestor.
Var stop_gradient(const Var& a);

}  // namespace flowvi
