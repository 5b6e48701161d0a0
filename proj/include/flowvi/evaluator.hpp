#pragma once

// Final-quality estimators over a trained model: ELBO, importance-sampling
// log marginal likelihood and sliced Wasserstein distance.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowvi/flow.hpp"
#include "flowvi/targets.hpp"
#include "json.hpp"

namespace flowvi {

struct EvalConfig {
  std::size_t samples = 20000;  // b_eval
  std::size_t repeats = 20;
  std::size_t projections = 128;
  std::uint64_t seed = 0;
  std::size_t chunk = 2000;  // rows per forward pass, bounds memory only

  void validate() const;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;  // repeats that contributed
};

/// Mean and sample standard deviation (n − 1) of the finite entries.
MeanStd summarize(std::span<const double> values);

struct EvalReport {
  MeanStd elbo;
  MeanStd log_marginal;
  std::optional<MeanStd> swd;
  std::optional<double> true_log_marginal;
  std::size_t nonfinite = 0;        // per-sample terms that were not finite
  std::size_t dropped_repeats = 0;  // repeats with > 1% non-finite terms

  nlohmann::json to_json() const;
};

/// Draws `n` samples from q and returns log p(θ, D) − log q(θ) per sample.
/// When `theta` is given it receives the (n × d) draws.
std::vector<double> log_weights(FlowModel& model, const TargetModel& target, std::size_t n,
                                Rng& rng, std::size_t chunk = 2000, Tensor* theta = nullptr);

/// log of the mean of exp(w), via log-sum-exp.
double log_mean_exp(std::span<const double> w);

MeanStd estimate_elbo(FlowModel& model, const TargetModel& target, const EvalConfig& config);
MeanStd estimate_log_marginal_is(FlowModel& model, const TargetModel& target,
                                 const EvalConfig& config);
/// Both estimators from shared draws, plus sliced WD when the target has an exact sampler.
EvalReport evaluate(FlowModel& model, const TargetModel& target, const EvalConfig& config);

/// Mean over `projections` random unit directions of the 1-D 2-Wasserstein distance.
/// The larger set is subsampled without replacement to equalise counts.
double sliced_wasserstein(const Tensor& a, const Tensor& b, std::size_t projections, Rng& rng);
/// 1-D W2 between two equal-length samples: RMS of sorted differences.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

struct Correlation {
  double rho = 0.0;
  double lower = 0.0;  // 95% percentile bootstrap interval
  double upper = 0.0;
};

double pearson(std::span<const double> x, std::span<const double> y);
Correlation pearson_bootstrap(std::span<const double> x, std::span<const double> y,
                              std::size_t resamples, Rng& rng);

struct ElboErrorCorrelation {
  Correlation signed_error;  // ELBO vs (IS − log Z)
  Correlation neg_abs_error; // ELBO vs −|IS − log Z|
};

/// Needs ≥ 3 reports that all carry a true log marginal.
ElboErrorCorrelation elbo_vs_error_correlation(std::span<const EvalReport> reports,
                                               std::size_t resamples, std::uint64_t seed);

}  // namespace flowvi
