#include "flowvi/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "flowvi/special.hpp"

namespace flowvi {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// ---- Var / context --------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw ContractViolation("Var: use of an unbound variable");
  return tape_->value(id_);
}

const Tensor& BackwardContext::output() const { return tape_.nodes_[self_].value; }

const Tensor& BackwardContext::input(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[self_].inputs[k]].value;
}

bool BackwardContext::wants(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[self_].inputs[k]].needs_grad;
}

void BackwardContext::accumulate(std::size_t k, const Tensor& grad) {
  const NodeId target = tape_.nodes_[self_].inputs[k];
  if (!tape_.nodes_[target].needs_grad) return;
  auto& grads = *tape_.active_grads_;
  auto& touched = *tape_.active_touched_;
  if (!touched[target]) {
    grads[target] = grad;
    touched[target] = true;
  } else {
    grads[target] += grad;
  }
}

const Tensor& Gradients::of(const Var& v) const {
  if (v.id() >= grads_.size()) throw ContractViolation("Gradients::of: variable recorded after backward");
  return grads_[v.id()];
}

// ---- Tape -------------------------------------------------------------------------

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::vector<NodeId> inputs, BackwardRule rule) {
  bool needs = false;
  for (NodeId in : inputs) needs = needs || nodes_[in].needs_grad;
  if (!needs) {
    rule = nullptr;
    inputs.clear();
  }
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(rule), needs});
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Gradients Tape::backward(const Var& root) {
  if (root.tape() != this) throw ContractViolation("backward: root belongs to another tape");
  if (value(root.id()).size() != 1) {
    throw ContractViolation("backward: root must be scalar, got " +
                            value(root.id()).shape_string());
  }
  std::vector<Tensor> grads(nodes_.size());
  std::vector<bool> touched(nodes_.size(), false);
  active_grads_ = &grads;
  active_touched_ = &touched;
  grads[root.id()] = Tensor(value(root.id()).shape(), 1.0);
  touched[root.id()] = true;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!touched[i] || !node.rule) continue;
    BackwardContext ctx(*this, static_cast<NodeId>(i));
    node.rule(grads[i], ctx);
  }
  active_grads_ = nullptr;
  active_touched_ = nullptr;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!touched[i]) grads[i] = Tensor::zeros_like(nodes_[i].value);
  }
  return Gradients(std::move(grads));
}

void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ContractViolation("variables belong to different tapes");
  }
}

// ---- elementwise helpers ----------------------------------------------------------

namespace {

template <class F, class D>
Var unary(const Var& a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape()->record(std::move(y), {a.id()},
                          [dfdx](const Tensor& g, BackwardContext& ctx) {
                            const Tensor& xin = ctx.input(0);
                            const Tensor& yout = ctx.output();
                            Tensor dx(xin.shape());
                            for (std::size_t i = 0; i < xin.size(); ++i) {
                              dx[i] = g[i] * dfdx(xin[i], yout[i]);
                            }
                            ctx.accumulate(0, dx);
                          });
}

struct Broadcast {
  bool a_scalar = false;
  bool b_scalar = false;
  std::vector<std::size_t> shape;
};

Broadcast broadcast_shape(const Var& a, const Var& b, const char* op) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.same_shape(y)) return {false, false, x.shape()};
  if (y.is_scalar()) return {false, true, x.shape()};
  if (x.is_scalar()) return {true, false, y.shape()};
  throw ContractViolation(std::string(op) + ": shape mismatch " + x.shape_string() + " vs " +
                          y.shape_string());
}

Tensor reduce_to(const Tensor& g, bool scalar) {
  if (!scalar) return g;
  double s = 0.0;
  for (double v : g.values()) s += v;
  return Tensor::scalar(s);
}

// dfa(x, y, out), dfb(x, y, out) are local partial derivatives.
template <class F, class DA, class DB>
Var binary(const Var& a, const Var& b, const char* op, F f, DA dfa, DB dfb) {
  const Broadcast bc = broadcast_shape(a, b, op);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(bc.shape);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(x[bc.a_scalar ? 0 : i], y[bc.b_scalar ? 0 : i]);
  }
  return a.tape()->record(
      std::move(out), {a.id(), b.id()}, [bc, dfa, dfb](const Tensor& g, BackwardContext& ctx) {
        const Tensor& xin = ctx.input(0);
        const Tensor& yin = ctx.input(1);
        const Tensor& o = ctx.output();
        const std::size_t n = o.size();
        if (ctx.wants(0)) {
          Tensor da(o.shape());
          for (std::size_t i = 0; i < n; ++i) {
            da[i] = g[i] * dfa(xin[bc.a_scalar ? 0 : i], yin[bc.b_scalar ? 0 : i], o[i]);
          }
          ctx.accumulate(0, reduce_to(da, bc.a_scalar));
        }
        if (ctx.wants(1)) {
          Tensor db(o.shape());
          for (std::size_t i = 0; i < n; ++i) {
            db[i] = g[i] * dfb(xin[bc.a_scalar ? 0 : i], yin[bc.b_scalar ? 0 : i], o[i]);
          }
          ctx.accumulate(1, reduce_to(db, bc.b_scalar));
        }
      });
}

void check_matrix(const Var& m, const char* op) {
  if (m.value().rank() != 2) {
    throw ContractViolation(std::string(op) + ": expected a matrix, got " +
                            m.value().shape_string());
  }
}

}  // namespace

// ---- arithmetic -----------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Var neg(const Var& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var add(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var mul(const Var& a, double c) {
  return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return mul(a, b); }
Var operator/(const Var& a, const Var& b) { return div(a, b); }
Var operator-(const Var& a) { return neg(a); }
Var operator+(const Var& a, double c) { return add(a, c); }
Var operator+(double c, const Var& a) { return add(a, c); }
Var operator-(const Var& a, double c) { return add(a, -c); }
Var operator-(double c, const Var& a) { return add(neg(a), c); }
Var operator*(const Var& a, double c) { return mul(a, c); }
Var operator*(double c, const Var& a) { return mul(a, c); }
Var operator/(const Var& a, double c) { return mul(a, 1.0 / c); }

// ---- unary math --------------------------------------------------------------------------

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  for (double v : a.value().values()) {
    if (v < 0.0) throw DomainError("log of negative input", v);
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var log1p(const Var& a) {
  for (double v : a.value().values()) {
    if (v < -1.0) throw DomainError("log1p of input below -1", v);
  }
  return unary(
      a, [](double x) { return std::log1p(x); }, [](double x, double) { return 1.0 / (1.0 + x); });
}

Var atan(const Var& a) {
  return unary(
      a, [](double x) { return std::atan(x); }, [](double x, double) { return 1.0 / (1.0 + x * x); });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return flowvi::sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& a) {
  return unary(
      a, [](double x) { return flowvi::softplus(x); },
      [](double x, double) { return flowvi::sigmoid(x); });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sign(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); },
      [](double, double) { return 0.0; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  for (double v : a.value().values()) {
    if (v < 0.0) throw DomainError("sqrt of negative input", v);
  }
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var pow(const Var& a, double p) {
  return unary(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Var max(const Var& a, double c) {
  return unary(
      a, [c](double x) { return x >= c ? x : c; },
      [c](double x, double) { return x >= c ? 1.0 : 0.0; });
}

Var min(const Var& a, double c) {
  return unary(
      a, [c](double x) { return x <= c ? x : c; },
      [c](double x, double) { return x <= c ? 1.0 : 0.0; });
}

Var log_gamma(const Var& a) {
  return unary(
      a, [](double x) { return flowvi::log_gamma(x); },
      [](double x, double) { return flowvi::digamma(x); });
}

// ---- reductions ------------------------------------------------------------------------

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape()->record(Tensor::scalar(s), {a.id()},
                          [](const Tensor& g, BackwardContext& ctx) {
                            ctx.accumulate(0, Tensor(ctx.input(0).shape(), g[0]));
                          });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return mul(sum(a), 1.0 / n);
}

namespace {
double stable_lse(const double* v, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, v[i]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}
}  // namespace

Var logsumexp(const Var& a) {
  const Tensor& x = a.value();
  const double lse = stable_lse(x.data(), x.size());
  return a.tape()->record(Tensor::scalar(lse), {a.id()},
                          [](const Tensor& g, BackwardContext& ctx) {
                            const Tensor& xin = ctx.input(0);
                            const double l = ctx.output()[0];
                            Tensor dx(xin.shape());
                            for (std::size_t i = 0; i < xin.size(); ++i) {
                              dx[i] = g[0] * std::exp(xin[i] - l);
                            }
                            ctx.accumulate(0, dx);
                          });
}

Var sum_rows(const Var& a) {
  check_matrix(a, "sum_rows");
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out({r});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x(i, j);
    out[i] = s;
  }
  return a.tape()->record(std::move(out), {a.id()}, [](const Tensor& g, BackwardContext& ctx) {
    const Tensor& xin = ctx.input(0);
    Tensor dx(xin.shape());
    for (std::size_t i = 0; i < xin.rows(); ++i) {
      for (std::size_t j = 0; j < xin.cols(); ++j) dx(i, j) = g[i];
    }
    ctx.accumulate(0, dx);
  });
}

Var logsumexp_rows(const Var& a) {
  check_matrix(a, "logsumexp_rows");
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out({r});
  for (std::size_t i = 0; i < r; ++i) out[i] = stable_lse(x.data() + i * c, c);
  return a.tape()->record(std::move(out), {a.id()}, [](const Tensor& g, BackwardContext& ctx) {
    const Tensor& xin = ctx.input(0);
    const Tensor& l = ctx.output();
    Tensor dx(xin.shape());
    for (std::size_t i = 0; i < xin.rows(); ++i) {
      for (std::size_t j = 0; j < xin.cols(); ++j) dx(i, j) = g[i] * std::exp(xin(i, j) - l[i]);
    }
    ctx.accumulate(0, dx);
  });
}

// ---- linear algebra ------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || (y.rank() != 2 && y.rank() != 1)) {
    throw ContractViolation("matmul: unsupported ranks " + x.shape_string() + " · " +
                            y.shape_string());
  }
  const std::size_t m = x.rows(), k = x.cols();
  const bool vec = y.rank() == 1;
  const std::size_t k2 = vec ? y.size() : y.rows();
  const std::size_t n = vec ? 1 : y.cols();
  if (k != k2) {
    throw ContractViolation("matmul: inner dimensions differ " + x.shape_string() + " · " +
                            y.shape_string());
  }
  Tensor out(vec ? std::vector<std::size_t>{m} : std::vector<std::size_t>{m, n});
  MatMap(out.data(), m, n).noalias() = ConstMatMap(x.data(), m, k) * ConstMatMap(y.data(), k, n);
  return a.tape()->record(
      std::move(out), {a.id(), b.id()}, [m, k, n](const Tensor& g, BackwardContext& ctx) {
        const ConstMatMap gm(g.data(), m, n);
        if (ctx.wants(0)) {
          Tensor da(ctx.input(0).shape());
          MatMap(da.data(), m, k).noalias() = gm * ConstMatMap(ctx.input(1).data(), k, n).transpose();
          ctx.accumulate(0, da);
        }
        if (ctx.wants(1)) {
          Tensor db(ctx.input(1).shape());
          MatMap(db.data(), k, n).noalias() = ConstMatMap(ctx.input(0).data(), m, k).transpose() * gm;
          ctx.accumulate(1, db);
        }
      });
}

namespace {

enum class Axis { Row, Col };

// m (b×k) combined with vector v: Row → v has length k, Col → v has length b.
template <Axis axis, bool multiply>
Var broadcast_vec(const Var& m, const Var& v, const char* op) {
  require_same_tape(m, v);
  check_matrix(m, op);
  const Tensor& x = m.value();
  const Tensor& w = v.value();
  const std::size_t r = x.rows(), c = x.cols();
  const std::size_t expect = axis == Axis::Row ? c : r;
  if (w.rank() != 1 || w.size() != expect) {
    throw ContractViolation(std::string(op) + ": vector " + w.shape_string() +
                            " does not fit matrix " + x.shape_string());
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double wv = w[axis == Axis::Row ? j : i];
      out(i, j) = multiply ? x(i, j) * wv : x(i, j) + wv;
    }
  }
  return m.tape()->record(std::move(out), {m.id(), v.id()}, [](const Tensor& g,
                                                               BackwardContext& ctx) {
    const Tensor& xin = ctx.input(0);
    const Tensor& win = ctx.input(1);
    const std::size_t r = xin.rows(), c = xin.cols();
    if (ctx.wants(0)) {
      if constexpr (multiply) {
        Tensor dx(xin.shape());
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) dx(i, j) = g(i, j) * win[axis == Axis::Row ? j : i];
        }
        ctx.accumulate(0, dx);
      } else {
        ctx.accumulate(0, g);
      }
    }
    if (ctx.wants(1)) {
      Tensor dw(win.shape());
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double contrib = multiply ? g(i, j) * xin(i, j) : g(i, j);
          dw[axis == Axis::Row ? j : i] += contrib;
        }
      }
      ctx.accumulate(1, dw);
    }
  });
}

}  // namespace

Var add_row(const Var& m, const Var& row) { return broadcast_vec<Axis::Row, false>(m, row, "add_row"); }
Var mul_row(const Var& m, const Var& row) { return broadcast_vec<Axis::Row, true>(m, row, "mul_row"); }
Var add_col(const Var& m, const Var& col) { return broadcast_vec<Axis::Col, false>(m, col, "add_col"); }
Var mul_col(const Var& m, const Var& col) { return broadcast_vec<Axis::Col, true>(m, col, "mul_col"); }

Var select_cols(const Var& m, std::span<const std::size_t> cols) {
  check_matrix(m, "select_cols");
  const Tensor& x = m.value();
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  for (std::size_t j : idx) {
    if (j >= c) throw ContractViolation("select_cols: column index out of range");
  }
  Tensor out({r, idx.size()});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < idx.size(); ++j) out(i, j) = x(i, idx[j]);
  }
  return m.tape()->record(std::move(out), {m.id()},
                          [idx](const Tensor& g, BackwardContext& ctx) {
                            const Tensor& xin = ctx.input(0);
                            Tensor dx(xin.shape());
                            for (std::size_t i = 0; i < xin.rows(); ++i) {
                              for (std::size_t j = 0; j < idx.size(); ++j) {
                                dx(i, idx[j]) += g(i, j);
                              }
                            }
                            ctx.accumulate(0, dx);
                          });
}

Var column(const Var& m, std::size_t j) {
  check_matrix(m, "column");
  const Tensor& x = m.value();
  if (j >= x.cols()) throw ContractViolation("column: index out of range");
  const std::size_t r = x.rows();
  Tensor out({r});
  for (std::size_t i = 0; i < r; ++i) out[i] = x(i, j);
  return m.tape()->record(std::move(out), {m.id()}, [j](const Tensor& g, BackwardContext& ctx) {
    const Tensor& xin = ctx.input(0);
    Tensor dx(xin.shape());
    for (std::size_t i = 0; i < xin.rows(); ++i) dx(i, j) = g[i];
    ctx.accumulate(0, dx);
  });
}

Var merge_cols(const Var& a, std::span<const std::size_t> cols_a, const Var& b,
               std::span<const std::size_t> cols_b, std::size_t d) {
  require_same_tape(a, b);
  check_matrix(a, "merge_cols");
  check_matrix(b, "merge_cols");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rows() != y.rows() || x.cols() != cols_a.size() || y.cols() != cols_b.size() ||
      cols_a.size() + cols_b.size() != d) {
    throw ContractViolation("merge_cols: inconsistent partition");
  }
  std::vector<std::size_t> ia(cols_a.begin(), cols_a.end());
  std::vector<std::size_t> ib(cols_b.begin(), cols_b.end());
  const std::size_t r = x.rows();
  Tensor out({r, d});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < ia.size(); ++j) out(i, ia[j]) = x(i, j);
    for (std::size_t j = 0; j < ib.size(); ++j) out(i, ib[j]) = y(i, j);
  }
  return a.tape()->record(std::move(out), {a.id(), b.id()},
                          [ia, ib](const Tensor& g, BackwardContext& ctx) {
                            const std::size_t r = g.rows();
                            if (ctx.wants(0)) {
                              Tensor dx(ctx.input(0).shape());
                              for (std::size_t i = 0; i < r; ++i) {
                                for (std::size_t j = 0; j < ia.size(); ++j) dx(i, j) = g(i, ia[j]);
                              }
                              ctx.accumulate(0, dx);
                            }
                            if (ctx.wants(1)) {
                              Tensor dy(ctx.input(1).shape());
                              for (std::size_t i = 0; i < r; ++i) {
                                for (std::size_t j = 0; j < ib.size(); ++j) dy(i, j) = g(i, ib[j]);
                              }
                              ctx.accumulate(1, dy);
                            }
                          });
}

Var stack_cols(std::span<const Var> cols) {
  if (cols.empty()) throw ContractViolation("stack_cols: no columns");
  const std::size_t r = cols[0].value().size();
  std::vector<NodeId> ids;
  for (const Var& c : cols) {
    require_same_tape(cols[0], c);
    if (c.value().rank() != 1 || c.value().size() != r) {
      throw ContractViolation("stack_cols: columns must be vectors of equal length");
    }
    ids.push_back(c.id());
  }
  const std::size_t k = cols.size();
  Tensor out({r, k});
  for (std::size_t j = 0; j < k; ++j) {
    const Tensor& v = cols[j].value();
    for (std::size_t i = 0; i < r; ++i) out(i, j) = v[i];
  }
  return cols[0].tape()->record(std::move(out), std::move(ids),
                                [k](const Tensor& g, BackwardContext& ctx) {
                                  const std::size_t r = g.rows();
                                  for (std::size_t j = 0; j < k; ++j) {
                                    if (!ctx.wants(j)) continue;
                                    Tensor dc({r});
                                    for (std::size_t i = 0; i < r; ++i) dc[i] = g(i, j);
                                    ctx.accumulate(j, dc);
                                  }
                                });
}

Var stop_gradient(const Var& a) { return a.tape()->constant(a.value()); }

}  // namespace flowvi
