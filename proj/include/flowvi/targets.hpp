#pragma once

// Unnormalised log joint densities log p(θ, D) over unconstrained parameters.
// Positive quantities are reached through softplus; its log-Jacobian
// log σ(x_raw) is included in every log_joint.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "flowvi/distributions.hpp"
#include "flowvi/tape.hpp"

namespace flowvi {

class TargetModel {
 public:
  virtual ~TargetModel() = default;
  virtual std::string name() const = 0;
  virtual std::size_t dim() const = 0;
  /// Per-row log p(θ, D) for a (batch × dim) matrix of unconstrained parameters.
  virtual Var log_joint(Tape& tape, const Var& theta) const = 0;
  virtual std::optional<double> true_log_marginal() const { return std::nullopt; }
  virtual bool has_exact_sampler() const { return false; }
  /// (n × dim) exact posterior draws in the unconstrained parameterisation.
  virtual Tensor sample_posterior(std::size_t n, Rng& rng) const;

  /// Value-only evaluation at a single point.
  double log_joint_at(std::span<const double> theta) const;
};

/// N(0, I_d) with log Z = 0; the base distribution viewed as a target.
class StandardNormalTarget final : public TargetModel {
 public:
  explicit StandardNormalTarget(std::size_t dim);
  std::string name() const override { return "stdnormal"; }
  std::size_t dim() const override { return dim_; }
  Var log_joint(Tape& tape, const Var& theta) const override;
  std::optional<double> true_log_marginal() const override { return 0.0; }
  bool has_exact_sampler() const override { return true; }
  Tensor sample_posterior(std::size_t n, Rng& rng) const override;

 private:
  std::size_t dim_;
};

/// θ1 ~ N(0, 9), θj | θ1 ~ N(0, e^θ1) for j ≥ 2.
class FunnelTarget final : public TargetModel {
 public:
  explicit FunnelTarget(std::size_t dim);
  std::string name() const override { return "funnel"; }
  std::size_t dim() const override { return dim_; }
  Var log_joint(Tape& tape, const Var& theta) const override;
  std::optional<double> true_log_marginal() const override { return 0.0; }
  bool has_exact_sampler() const override { return true; }
  Tensor sample_posterior(std::size_t n, Rng& rng) const override;

 private:
  std::size_t dim_;
};

/// Zero-mean multivariate student-t with unit diagonal and constant off-diagonal ρ.
class MultivariateTTarget final : public TargetModel {
 public:
  static constexpr double kDefaultDof = 1.0;
  static constexpr double kDefaultCorrelation = 0.8;
  explicit MultivariateTTarget(std::size_t dim, double dof = kDefaultDof,
                               double correlation = kDefaultCorrelation);
  std::string name() const override { return "mvt"; }
  std::size_t dim() const override { return dim_; }
  Var log_joint(Tape& tape, const Var& theta) const override;
  std::optional<double> true_log_marginal() const override { return 0.0; }
  bool has_exact_sampler() const override { return true; }
  Tensor sample_posterior(std::size_t n, Rng& rng) const override;

  double dof() const noexcept { return dof_; }
  double correlation() const noexcept { return rho_; }
  /// Σ⁻¹ from the closed form 1/(1−ρ)·[I − ρ/(1−ρ+dρ)·11ᵀ], row-major d×d.
  Tensor scale_inverse() const;
  double log_det_scale() const;

 private:
  std::size_t dim_;
  double dof_;
  double rho_;
};

/// Equal-weight mixture of N(c·1, I) for c ∈ {6/√d, −6/√d, 0}.
class GaussianMixtureTarget final : public TargetModel {
 public:
  explicit GaussianMixtureTarget(std::size_t dim);
  std::string name() const override { return "mixture"; }
  std::size_t dim() const override { return dim_; }
  Var log_joint(Tape& tape, const Var& theta) const override;
  std::optional<double> true_log_marginal() const override { return 0.0; }
  bool has_exact_sampler() const override { return true; }
  Tensor sample_posterior(std::size_t n, Rng& rng) const override;

 private:
  std::size_t dim_;
  std::vector<double> centres_;
};

enum class DataKind { Regression, Logistic };

struct SyntheticDataset {
  Tensor x;                // n × d′
  std::vector<double> y;   // n
  DataKind kind = DataKind::Regression;
  std::uint64_t seed = 0;
  std::size_t n() const { return y.size(); }
  std::size_t features() const { return x.rank() == 2 ? x.cols() : 0; }
};

/// Regression: Tibshirani (1996) example 1 (β = (3, 1.5, 0, 0, 2, 0, 0, 0), zero-padded,
/// correlation 0.5^|i−j|, noise σ = 3). Logistic: x ~ N(0, C), C_ij = 0.1^|i−j|,
/// y ~ Bernoulli(σ(xᵀβ0 + 1)) with β0 = 3, 1.5, 2 at dimensions 1, 2, 5.
SyntheticDataset generate_synthetic(DataKind kind, std::size_t features, std::size_t n,
                                    std::uint64_t seed);

/// CSV with header x_1..x_{d′},y.
void write_dataset_csv(const SyntheticDataset& data, const std::filesystem::path& path);
SyntheticDataset read_dataset_csv(const std::filesystem::path& path, DataKind kind);

/// σ² ~ Inv-Gamma(½, ½), β ~ N(0, σ² I), y_i ~ N(x_iᵀβ, σ²). θ = (β, σ²_raw).
class ConjugateLinearRegression final : public TargetModel {
 public:
  explicit ConjugateLinearRegression(SyntheticDataset data);
  std::string name() const override { return "conjlr"; }
  std::size_t dim() const override { return features_ + 1; }
  Var log_joint(Tape& tape, const Var& theta) const override;
  std::optional<double> true_log_marginal() const override { return log_marginal_; }
  bool has_exact_sampler() const override { return true; }
  Tensor sample_posterior(std::size_t n, Rng& rng) const override;

  const SyntheticDataset& data() const noexcept { return data_; }
  double posterior_shape() const noexcept { return alpha_post_; }
  double posterior_scale() const noexcept { return beta_post_; }
  /// U⁻¹Xᵀy.
  const std::vector<double>& posterior_mean() const noexcept { return mu_post_; }

 private:
  SyntheticDataset data_;
  std::size_t features_;
  Tensor xt_;  // d′ × n
  Tensor y_;   // n
  double log_marginal_ = 0.0;
  double alpha_post_ = 0.0;
  double beta_post_ = 0.0;
  std::vector<double> mu_post_;
  std::vector<double> chol_u_;  // lower Cholesky factor of U, row-major
};

/// Closed-form log p(y | X) for the conjugate regression model, computed through a
/// Cholesky factor of U = XᵀX + I and the matrix-determinant lemma.
double conjlr_true_log_marginal(const Tensor& x, std::span<const double> y);

/// τ ~ C+(0,1); λ_j ~ C+(0,1); β_j ~ N(0, τ²λ_j²); μ ~ C+(0,10);
/// y_i ~ Bernoulli(σ(x_iᵀβ + μ)). θ = (β, λ_raw, τ_raw, μ_raw), d = 2d′ + 2.
class HorseshoeLogistic final : public TargetModel {
 public:
  explicit HorseshoeLogistic(SyntheticDataset data);
  std::string name() const override { return "horseshoe"; }
  std::size_t dim() const override { return 2 * features_ + 2; }
  Var log_joint(Tape& tape, const Var& theta) const override;

 private:
  SyntheticDataset data_;
  std::size_t features_;
  Tensor xt_;    // d′ × n
  Tensor sign_;  // n, entries 2y − 1
};

}  // namespace flowvi
