#include "flowvi/special.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "flowvi/tensor.hpp"

namespace flowvi {

namespace {
constexpr double kShiftTo = 10.0;
}

double log_gamma(double x) {
  if (!(x > 0.0)) throw DomainError("log_gamma requires x > 0", x);
  double shift = 0.0;
  double product = 1.0;
  while (x < kShiftTo) {
    product *= x;
    x += 1.0;
    if (product > 1e280) {
      shift += std::log(product);
      product = 1.0;
    }
  }
  shift += std::log(product);
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Stirling series with Bernoulli coefficients B_2k / (2k(2k-1)).
  double series = 1.0 / 156.0;
  series = series * inv2 - 691.0 / 360360.0;
  series = series * inv2 + 1.0 / 1188.0;
  series = series * inv2 - 1.0 / 1680.0;
  series = series * inv2 + 1.0 / 1260.0;
  series = series * inv2 - 1.0 / 360.0;
  series = series * inv2 + 1.0 / 12.0;
  series *= inv;
  const double stirling =
      (x - 0.5) * std::log(x) - x + 0.5 * std::log(2.0 * std::numbers::pi) + series;
  return stirling - shift;
}

double digamma(double x) {
  if (!(x > 0.0)) throw DomainError("digamma requires x > 0", x);
  double shift = 0.0;
  while (x < kShiftTo) {
    shift += 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  double series = -1.0 / 12.0;
  series = series * inv2 + 691.0 / 32760.0;
  series = series * inv2 - 1.0 / 132.0;
  series = series * inv2 + 1.0 / 240.0;
  series = series * inv2 - 1.0 / 252.0;
  series = series * inv2 + 1.0 / 120.0;
  series = series * inv2 - 1.0 / 12.0;
  series *= inv2;
  return std::log(x) - 0.5 * inv + series - shift;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus_inverse requires y > 0", y);
  // log(e^y - 1) = y + log(1 - e^-y)
  return y + std::log(-std::expm1(-y));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace flowvi
