#pragma once

// Shared oracles for the unit tests.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "flowvi/tape.hpp"

namespace fvtest {

using flowvi::Tensor;

/// Central differences of a scalar function.
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = f(x);
    x[i] = x0 - h;
    const double down = f(x);
    x[i] = x0;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b, double floor = 1.0) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

/// Compare the tape gradient of sum(build(x)) against central differences.
/// `build` maps a leaf holding `x` (with `shape`) to any Var; the root is its sum.
inline double gradient_check(const std::vector<std::size_t>& shape, const std::vector<double>& x,
                             const std::function<flowvi::Var(flowvi::Tape&, const flowvi::Var&)>& build,
                             double h = 1e-6) {
  flowvi::Tape tape;
  const flowvi::Var leaf = tape.parameter(Tensor(shape, x));
  const flowvi::Var root = flowvi::sum(build(tape, leaf));
  const auto grads = tape.backward(root);
  const auto analytic = grads.of(leaf).values();
  auto value = [&](std::span<const double> v) {
    flowvi::Tape t;
    const flowvi::Var l = t.constant(Tensor(shape, std::vector<double>(v.begin(), v.end())));
    return flowvi::sum(build(t, l)).value().item();
  };
  const auto numeric = fd_gradient(value, x, h);
  return max_rel_error(analytic, numeric);
}

}  // namespace fvtest
