#include <cmath>
#include <random>

#include "doctest.h"
#include "flowvi/tape.hpp"
#include "support.hpp"

using namespace flowvi;
using fvtest::gradient_check;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(g);
  return v;
}

}  // namespace

TEST_CASE("tensor shapes and contract violations") {
  Tensor m({2, 3}, 1.5);
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 3);
  CHECK(m.size() == 6);
  CHECK_THROWS_AS(Tensor({2, 2, 2}), ContractViolation);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0, 2.0}), ContractViolation);
  CHECK_THROWS_AS(m.item(), ContractViolation);
  Tensor v({3});
  CHECK(v.rows() == 1);
  CHECK(Tensor::scalar(2.0).item() == 2.0);
  Tensor nan_t({2}, std::vector<double>{1.0, std::nan("")});
  CHECK_FALSE(nan_t.all_finite());
  CHECK(std::isnan(nan_t.max_abs()));
}

TEST_CASE("elementwise shape mismatch is a contract violation") {
  Tape tape;
  const Var a = tape.parameter(Tensor({2, 3}, 1.0));
  const Var b = tape.parameter(Tensor({3, 2}, 1.0));
  CHECK_THROWS_AS(a + b, ContractViolation);
  CHECK_THROWS_AS(matmul(a, a), ContractViolation);
  Tape other;
  const Var c = other.parameter(Tensor({2, 3}, 1.0));
  CHECK_THROWS_AS(a + c, ContractViolation);
}

TEST_CASE("domain errors carry the offending value") {
  Tape tape;
  const Var a = tape.parameter(Tensor::vector({1.0, -2.0}));
  try {
    (void)log(a);
    FAIL("log of a negative entry must throw");
  } catch (const DomainError& e) {
    CHECK(e.value() == -2.0);
  }
  CHECK_THROWS_AS(sqrt(a), DomainError);
  CHECK_THROWS_AS(log1p(a), DomainError);
}

TEST_CASE("backward requires a scalar root") {
  Tape tape;
  const Var a = tape.parameter(Tensor({3}, 1.0));
  CHECK_THROWS_AS(tape.backward(a * 2.0), ContractViolation);
}

TEST_CASE("unary primitives match central differences") {
  const std::vector<std::size_t> shape = {3, 4};
  const auto x = random_values(12, 1);
  const auto pos = random_values(12, 2, 0.2, 3.0);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return exp(v); }) < 1e-7);
  CHECK(gradient_check(shape, pos, [](Tape&, const Var& v) { return log(v); }) < 1e-7);
  CHECK(gradient_check(shape, pos, [](Tape&, const Var& v) { return log1p(v); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return atan(v); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return tanh(v); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return relu(v); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return sigmoid(v); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return softplus(v); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return abs(v); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return square(v); }) < 1e-7);
  CHECK(gradient_check(shape, pos, [](Tape&, const Var& v) { return sqrt(v); }) < 1e-7);
  CHECK(gradient_check(shape, pos, [](Tape&, const Var& v) { return pow(v, -1.5); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return max(v, 0.3); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return min(v, 0.3); }) < 1e-7);
  CHECK(gradient_check(shape, pos, [](Tape&, const Var& v) { return log_gamma(v); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return v * sign(v); }) < 1e-7);
}

TEST_CASE("binary primitives and scalar broadcast match central differences") {
  const std::vector<std::size_t> shape = {2, 3};
  const auto x = random_values(6, 3, 0.5, 2.0);
  const Tensor other({2, 3}, random_values(6, 4, 0.5, 2.0));
  auto with = [&](auto op) {
    return [=](Tape& t, const Var& v) { return op(v, t.constant(other)); };
  };
  CHECK(gradient_check(shape, x, with([](const Var& a, const Var& b) { return a + b; })) < 1e-7);
  CHECK(gradient_check(shape, x, with([](const Var& a, const Var& b) { return b - a; })) < 1e-7);
  CHECK(gradient_check(shape, x, with([](const Var& a, const Var& b) { return a * b; })) < 1e-7);
  CHECK(gradient_check(shape, x, with([](const Var& a, const Var& b) { return b / a; })) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return v * v / (v + 3.0); }) < 1e-7);
  CHECK(gradient_check(shape, x, [](Tape&, const Var& v) { return 2.0 - v * 0.5 + pow(v, -1.0); }) < 1e-7);
  // scalar leaf broadcast against a matrix
  CHECK(gradient_check({}, {0.7}, [&](Tape& t, const Var& s) { return t.constant(other) * s + s; }) < 1e-7);
  CHECK(gradient_check({}, {0.7}, [&](Tape& t, const Var& s) { return t.constant(other) / s; }) < 1e-7);
}

TEST_CASE("reductions, matmul and broadcast helpers match central differences") {
  const auto x = random_values(12, 5);
  CHECK(gradient_check({3, 4}, x, [](Tape&, const Var& v) { return mean(v) * 3.0; }) < 1e-7);
  CHECK(gradient_check({3, 4}, x, [](Tape&, const Var& v) { return logsumexp(v); }) < 1e-7);
  CHECK(gradient_check({3, 4}, x, [](Tape&, const Var& v) { return square(sum_rows(v)); }) < 1e-7);
  CHECK(gradient_check({3, 4}, x, [](Tape&, const Var& v) { return square(logsumexp_rows(v)); }) < 1e-7);

  const Tensor w({4, 2}, random_values(8, 6));
  CHECK(gradient_check({3, 4}, x, [&](Tape& t, const Var& v) { return square(matmul(v, t.constant(w))); }) < 1e-7);
  CHECK(gradient_check({4, 2}, w.storage(), [&](Tape& t, const Var& v) {
          return square(matmul(t.constant(Tensor({3, 4}, x)), v));
        }) < 1e-7);
  const Tensor vec({4}, random_values(4, 7));
  CHECK(gradient_check({3, 4}, x, [&](Tape& t, const Var& v) { return square(matmul(v, t.constant(vec))); }) < 1e-7);

  const Tensor row({4}, random_values(4, 8));
  const Tensor col({3}, random_values(3, 9));
  CHECK(gradient_check({3, 4}, x, [&](Tape& t, const Var& v) { return square(add_row(v, t.constant(row))); }) < 1e-7);
  CHECK(gradient_check({4}, row.storage(), [&](Tape& t, const Var& r) {
          return square(mul_row(t.constant(Tensor({3, 4}, x)), r));
        }) < 1e-7);
  CHECK(gradient_check({3}, col.storage(), [&](Tape& t, const Var& c) {
          return square(add_col(t.constant(Tensor({3, 4}, x)), c));
        }) < 1e-7);
  CHECK(gradient_check({3, 4}, x, [&](Tape& t, const Var& v) { return square(mul_col(v, t.constant(col))); }) < 1e-7);
}

TEST_CASE("column gather, merge and stack") {
  const auto x = random_values(15, 10);
  const std::vector<std::size_t> a = {0, 2, 4};
  const std::vector<std::size_t> b = {1, 3};
  CHECK(gradient_check({3, 5}, x, [&](Tape&, const Var& v) {
          return square(merge_cols(select_cols(v, b), b, select_cols(v, a) * 2.0, a, 5));
        }) < 1e-7);
  CHECK(gradient_check({3, 5}, x, [&](Tape&, const Var& v) {
          std::vector<Var> cols = {column(v, 4), column(v, 0) * column(v, 1)};
          return square(stack_cols(cols));
        }) < 1e-7);

  Tape tape;
  const Var m = tape.constant(Tensor({3, 5}, x));
  const Var merged = merge_cols(select_cols(m, a), a, select_cols(m, b), b, 5);
  CHECK(merged.value() == m.value());
}

TEST_CASE("hand-computed values") {
  Tape tape;
  const Var a = tape.constant(Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}));
  const Var b = tape.constant(Tensor({2, 2}, std::vector<double>{5, 6, 7, 8}));
  const Tensor p = matmul(a, b).value();
  CHECK(p(0, 0) == 19.0);
  CHECK(p(0, 1) == 22.0);
  CHECK(p(1, 0) == 43.0);
  CHECK(p(1, 1) == 50.0);
  // log-sum-exp stays finite far from zero
  const Var big = tape.constant(Tensor::vector({1000.0, 1000.0}));
  CHECK(logsumexp(big).value().item() == doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
  CHECK(softplus(tape.constant(800.0)).value().item() == 800.0);
  CHECK(std::isfinite(softplus(tape.constant(-800.0)).value().item()));
}

TEST_CASE("stop_gradient and unused leaves") {
  Tape tape;
  const Var a = tape.parameter(Tensor::vector({1.0, 2.0}));
  const Var b = tape.parameter(Tensor::vector({3.0, 4.0}));
  const Var unused = tape.parameter(Tensor({2, 2}, 1.0));
  const Var root = sum(a * stop_gradient(a) + b * 0.0);
  const auto g = tape.backward(root);
  CHECK(g.of(a)[0] == 1.0);  // d/da (a·const) = const
  CHECK(g.of(a)[1] == 2.0);
  CHECK(g.of(b)[0] == 0.0);
  CHECK(g.of(unused).same_shape(unused.value()));
  CHECK(g.of(unused).max_abs() == 0.0);
}

TEST_CASE("fan-out accumulates gradients") {
  Tape tape;
  const Var x = tape.parameter(Tensor::scalar(3.0));
  const Var y = x * x + x * 2.0 + exp(x) * 0.0;
  CHECK(tape.backward(y).of(x).item() == doctest::Approx(8.0));
}

TEST_CASE("constants do not record backward rules") {
  Tape tape;
  const Var c = tape.constant(Tensor({2}, 1.0));
  const Var d = exp(c) + 1.0;
  CHECK_FALSE(tape.needs_grad(d.id()));
  const Var p = tape.parameter(Tensor({2}, 1.0));
  CHECK(tape.needs_grad((p + d).id()));
}
