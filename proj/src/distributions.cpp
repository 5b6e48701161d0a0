#include "flowvi/distributions.hpp"

#include <cmath>
#include <numbers>

#include "flowvi/special.hpp"

namespace flowvi {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

double Rng::uniform() {
  // 53 random bits, shifted off zero.
  return (static_cast<double>(engine_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw DomainError("gamma shape must be positive", shape);
  if (shape < 1.0) {
    const double u = uniform();
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = 0.0;
    double v = 0.0;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::size_t Rng::index(std::size_t n) {
  return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

Tensor Rng::normal_matrix(std::size_t rows, std::size_t cols) {
  Tensor t({rows, cols});
  for (double& v : t.values()) v = normal();
  return t;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t offset) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (offset + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace kernel {

double normal(double x, double mean, double variance) {
  const double r = x - mean;
  return -0.5 * (kLog2Pi + std::log(variance)) - 0.5 * r * r / variance;
}

double student_t(double x, double nu) {
  return log_gamma(0.5 * (nu + 1.0)) - log_gamma(0.5 * nu) - 0.5 * std::log(nu * std::numbers::pi) -
         0.5 * (nu + 1.0) * std::log1p(x * x / nu);
}

double half_cauchy(double x, double scale) {
  if (x < 0.0) return -std::numeric_limits<double>::infinity();
  const double r = x / scale;
  return std::log(2.0 / (std::numbers::pi * scale)) - std::log1p(r * r);
}

double inv_gamma(double x, double shape, double scale) {
  if (x <= 0.0) return -std::numeric_limits<double>::infinity();
  return shape * std::log(scale) - log_gamma(shape) - (shape + 1.0) * std::log(x) - scale / x;
}

double bernoulli_logit(double y, double logit) { return -softplus(-(2.0 * y - 1.0) * logit); }

}  // namespace kernel

// ---- BaseDistribution ----------------------------------------------------------------

BaseDistribution::BaseDistribution(BaseKind kind, std::size_t dim) : kind_(kind), dim_(dim) {
  if (dim == 0) throw ContractViolation("BaseDistribution: dim must be positive");
}

BaseDistribution BaseDistribution::gaussian(std::size_t dim) {
  return BaseDistribution(BaseKind::Gaussian, dim);
}

BaseDistribution BaseDistribution::student_t(std::size_t dim, double initial_dof) {
  BaseDistribution b(BaseKind::StudentT, dim);
  b.raw_dof_ = Tensor({dim}, 0.0);
  std::vector<double> nu(dim, initial_dof);
  b.set_dof(nu);
  return b;
}

std::vector<ParameterRef> BaseDistribution::parameters() {
  if (kind_ != BaseKind::StudentT) return {};
  return {ParameterRef{"base.raw_dof", &raw_dof_, dof_trainable_}};
}

std::vector<double> BaseDistribution::dof() const {
  if (kind_ != BaseKind::StudentT) return {};
  std::vector<double> nu(dim_);
  for (std::size_t j = 0; j < dim_; ++j) nu[j] = softplus(raw_dof_[j]) + 2.0;
  return nu;
}

void BaseDistribution::set_dof(std::span<const double> nu) {
  if (kind_ != BaseKind::StudentT) throw ContractViolation("set_dof on a Gaussian base");
  if (nu.size() != dim_) throw ContractViolation("set_dof: wrong length");
  for (std::size_t j = 0; j < dim_; ++j) {
    if (!(nu[j] > 2.0)) throw DomainError("student-t base requires dof > 2", nu[j]);
    raw_dof_[j] = softplus_inverse(nu[j] - 2.0);
  }
}

Tensor BaseDistribution::sample(std::size_t batch, Rng& rng) const {
  if (batch == 0) throw ContractViolation("base_sample: batch must be positive");
  Tensor z({batch, dim_});
  if (kind_ == BaseKind::Gaussian) {
    for (double& v : z.values()) v = rng.normal();
    return z;
  }
  const std::vector<double> nu = dof();
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < dim_; ++j) {
      const double eps = rng.normal();
      const double g = rng.gamma(0.5 * nu[j]) / (0.5 * nu[j]);
      z(i, j) = eps / std::sqrt(g);
    }
  }
  return z;
}

Var BaseDistribution::log_prob(Tape& tape, const Var& z, std::span<const Var> params) const {
  const Tensor& zv = z.value();
  if (zv.rank() != 2 || zv.cols() != dim_) {
    throw ContractViolation("base_log_prob: expected (batch × " + std::to_string(dim_) +
                            "), got " + zv.shape_string());
  }
  const double d = static_cast<double>(dim_);
  if (kind_ == BaseKind::Gaussian) {
    return sum_rows(square(z)) * -0.5 + tape.constant(-0.5 * d * kLog2Pi);
  }
  if (params.size() != 1) throw ContractViolation("student-t base expects its raw_dof binding");
  const Var nu = softplus(params[0]) + 2.0;
  const Var half_nu_plus = (nu + 1.0) * 0.5;
  const Var normaliser =
      sum(log_gamma(half_nu_plus) - log_gamma(nu * 0.5) - log(nu * std::numbers::pi) * 0.5);
  const Var tail = log1p(mul_row(square(z), pow(nu, -1.0)));
  return normaliser - sum_rows(mul_row(tail, half_nu_plus));
}

}  // namespace flowvi
