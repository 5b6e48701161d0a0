#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowvi/tape.hpp"
#include "flowvi/tensor.hpp"

namespace flowvi {

/// Seeded random stream. One per run (or per repeat); never shared across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  /// Uniform on (0, 1).
  double uniform();
  /// Gamma(shape, rate = 1) by the Marsaglia–Tsang squeeze method.
  double gamma(double shape);
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  Tensor normal_matrix(std::size_t rows, std::size_t cols);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Derive an independent seed for stream `offset` of a base seed (splitmix64).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t offset);

// ---- closed-form 1-D log densities -------------------------------------------------
namespace kernel {
double normal(double x, double mean, double variance);
/// Standard student-t with ν degrees of freedom.
double student_t(double x, double nu);
/// Half-Cauchy C+(0, s) on x ≥ 0.
double half_cauchy(double x, double scale);
double inv_gamma(double x, double shape, double scale);
/// log P(y | logit) for y ∈ {0, 1}, computed as −softplus(−(2y−1)·logit).
double bernoulli_logit(double y, double logit);
}  // namespace kernel

/// Named tensor owned by a model, exposed to the trainer and snapshot code.
struct ParameterRef {
  std::string name;
  Tensor* tensor = nullptr;
  bool trainable = true;
};

enum class BaseKind { Gaussian, StudentT };

/// Base distribution q0: iid standard Gaussian, or independent student-t with
/// per-dimension degrees of freedom ν_j = softplus(raw_j) + 2.
class BaseDistribution {
 public:
  static constexpr double kInitialDof = 30.0;

  static BaseDistribution gaussian(std::size_t dim);
  static BaseDistribution student_t(std::size_t dim, double initial_dof = kInitialDof);

  BaseKind kind() const noexcept { return kind_; }
  std::size_t dim() const noexcept { return dim_; }

  /// Raw dof tensor (student-t only; empty list for Gaussian).
  std::vector<ParameterRef> parameters();
  std::size_t parameter_count() const noexcept { return kind_ == BaseKind::StudentT ? 1 : 0; }

  void set_dof_trainable(bool trainable) noexcept { dof_trainable_ = trainable; }
  bool dof_trainable() const noexcept { return dof_trainable_; }
  std::vector<double> dof() const;
  void set_dof(std::span<const double> nu);

  /// (batch × dim) draws. Student-t draws are ε / sqrt(g/ν) with g ~ Gamma(ν/2, rate ν/2);
  /// the result carries no gradient w.r.t. the dof.
  Tensor sample(std::size_t batch, Rng& rng) const;

  /// Per-row log q0(z). `params` are the bound parameters() in order.
  Var log_prob(Tape& tape, const Var& z, std::span<const Var> params) const;

 private:
  BaseDistribution(BaseKind kind, std::size_t dim);
  BaseKind kind_;
  std::size_t dim_;
  Tensor raw_dof_;
  bool dof_trainable_ = true;
};

}  // namespace flowvi
