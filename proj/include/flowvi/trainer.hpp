#pragma once

// Stochastic ELBO optimisation with the standard and path gradient estimators.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "flowvi/flow.hpp"
#include "flowvi/targets.hpp"

namespace flowvi {

enum class GradientMode { Standard, Path };
enum class SnapshotMode { LowestLossSecondHalf, Last };

std::string to_string(GradientMode mode);
std::string to_string(SnapshotMode mode);

/// Off, or the geometric ramp β_t = β_min^(1 − t/T) for t < T and 1 afterwards.
struct Annealing {
  bool enabled = false;
  std::size_t steps = 0;
  double beta_min = 0.01;

  static Annealing off() { return {}; }
  static Annealing geometric(std::size_t steps, double beta_min = 0.01);
  double temperature(std::size_t iteration) const;
  std::string describe() const;  // "off" or "geometric:T"
};

struct TrainConfig {
  GradientMode gradient = GradientMode::Path;
  std::size_t batch = 256;
  double learning_rate = 1e-4;
  std::size_t iterations = 60000;
  Annealing anneal;
  SnapshotMode snapshot = SnapshotMode::LowestLossSecondHalf;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;

  /// r = 8 style profile used by the tests and the CLI defaults.
  static TrainConfig desk();
  void validate() const;
};

/// Adam with bias correction; one moment pair per parameter tensor.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);
  void step(std::span<const ParameterRef> params, std::span<const Tensor> grads);
  std::size_t steps() const noexcept { return t_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// One mini-batch objective.
/// `objective` is what backward() is called on. Its value equals `loss` only in
/// Standard mode; under Path the density term is re-evaluated through the inverse
/// at frozen parameters, so `loss` (the forward-pass value) is what gets reported.
struct LossTerms {
  Var objective;
  double loss = 0.0;
  std::vector<double> log_weights;  // log p(θ_k, D) − log q(θ_k)
  bool finite = true;
};

/// `params` are model.bind(tape, true); `z` is a (batch × d) base draw.
LossTerms elbo_loss(Tape& tape, FlowModel& model, const TargetModel& target,
                    std::span<const Var> params, const Tensor& z, GradientMode mode,
                    double beta_temp = 1.0, FlowTrace* trace = nullptr);

/// Gradients of the single-sample objective for each row of `z`, flattened in
/// parameters() order. Row k holds the contribution of sample k.
std::vector<std::vector<double>> per_sample_gradients(FlowModel& model, const TargetModel& target,
                                                      const Tensor& z, GradientMode mode);

/// Mean gradient of the mini-batch objective, flattened.
std::vector<double> batch_gradient(FlowModel& model, const TargetModel& target, const Tensor& z,
                                   GradientMode mode);

/// Coupling positions to report in traces: {4, 32, 64} capped at r, deduplicated.
std::vector<std::size_t> traced_layers(std::size_t couplings);

struct TraceRow {
  std::size_t iteration = 0;
  double loss = 0.0;
  std::size_t skipped = 0;
  double input_max_abs = 0.0;
  std::vector<double> coupling_max_abs;  // one per coupling layer
};

struct RunRecord {
  TrainConfig config;
  std::vector<double> losses;  // per iteration; NaN where the step was skipped
  std::vector<TraceRow> trace;
  std::size_t skipped = 0;
  std::optional<std::size_t> best_iteration;
  double best_loss = 0.0;
  Snapshot final_parameters;
  std::optional<Snapshot> best_parameters;
  std::vector<std::size_t> traced;  // 1-based coupling positions in JSONL output

  /// JSON-lines: one object per trace row, then {"summary": …}.
  void write_jsonl(std::ostream& out) const;
};

/// Runs config.iterations Adam steps. On return the model holds the selected
/// parameters: the lowest-loss snapshot from iterations ≥ M/2 under
/// LowestLossSecondHalf (falling back to the last iterate), else the last iterate.
RunRecord train(const TrainConfig& config, FlowModel& model, const TargetModel& target);

/// Mean-field Gaussian family: Gaussian base through a single diagonal affine layer.
FlowModel make_meanfield(std::size_t dim);

}  // namespace flowvi
