#pragma once

// Real NVP bijections with clamped scales, the LOFT layer and the trailing or
// leading affine layer, composed into a FlowStack.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "flowvi/distributions.hpp"
#include "flowvi/tape.hpp"

namespace flowvi {

/// Bounding function c(s) applied to the coupling scale output.
struct ClampMode {
  enum class Kind { None, Tanh, ArcTanSym, AsymSoft };
  Kind kind = Kind::None;
  double alpha_neg = 0.0;  // AsymSoft negative bound, ArcTanSym bound
  double alpha_pos = 0.0;  // AsymSoft positive bound

  static ClampMode none() { return {}; }
  static ClampMode tanh() { return {Kind::Tanh, 1.0, 1.0}; }
  static ClampMode arctan_sym(double alpha);
  static ClampMode asym_soft(double alpha_neg, double alpha_pos);

  std::string name() const;
  /// Open output interval of c; infinite bounds for None.
  double lower_bound() const;
  double upper_bound() const;
};

double clamp_value(double s, const ClampMode& mode);
Var clamp(const Var& s, const ClampMode& mode);

// LOFT g(z) = sign(z)(log(max(|z|−τ, 0) + 1) + min(|z|, τ)) and its inverse.
double loft_value(double z, double tau);
double loft_inverse_value(double y, double tau);
/// log g'(z) = −log(max(|z|−τ, 0) + 1).
double loft_log_derivative(double z, double tau);
Var loft(const Var& z, double tau);
/// Throws DomainError mentioning LOFT when |y| − τ exceeds 700.
Var loft_inverse(const Var& y, double tau);

/// Partition of {0..d−1}: S0 holds the even (0-based) positions, S1 the odd ones.
/// Coupling layer i (1-based) conditions on A = S_{(i+1) mod 2} and transforms B = S_{i mod 2}.
struct Partition {
  std::vector<std::size_t> conditioned;  // A
  std::vector<std::size_t> transformed;  // B
};
Partition coupling_partition(std::size_t dim, std::size_t layer_index);

/// One-hidden-layer ReLU perceptron, in → hidden → out. Output layer starts at zero.
class Conditioner {
 public:
  Conditioner(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);
  std::vector<ParameterRef> parameters(const std::string& prefix);
  static constexpr std::size_t kParameterCount = 4;
  /// `p` = bound (w1, b1, w2, b2).
  Var forward(const Var& x, std::span<const Var> p) const;
  std::size_t in() const noexcept { return in_; }
  std::size_t out() const noexcept { return out_; }

 private:
  std::size_t in_, hidden_, out_;
  Tensor w1_, b1_, w2_, b2_;
};

/// Per-layer maxima recorded during a forward pass.
struct CouplingTrace {
  double max_abs_output = 0.0;  // max |z^(i+1)|
  double max_abs_shift = 0.0;   // max |t_i|
  double max_scale = 0.0;       // max exp(c(s_i))
};

struct FlowTrace {
  double input_max_abs = 0.0;             // max |z^(1)| entering the first coupling
  std::vector<CouplingTrace> couplings;   // one per coupling layer, in order
  std::optional<std::size_t> nonfinite_layer;  // 1-based stack position
  double output_max_abs = 0.0;
};

struct LayerResult {
  Var value;
  Var log_det;  // per-sample (batch) vector
};

class CouplingLayer {
 public:
  CouplingLayer(std::size_t index, std::size_t dim, std::size_t hidden, ClampMode clamp, Rng& rng);
  std::size_t index() const noexcept { return index_; }
  const Partition& partition() const noexcept { return partition_; }
  const ClampMode& clamp_mode() const noexcept { return clamp_; }
  std::vector<ParameterRef> parameters(const std::string& prefix);
  static constexpr std::size_t kParameterCount = 2 * Conditioner::kParameterCount;

  LayerResult forward(Tape& tape, const Var& z, std::span<const Var> p,
                      CouplingTrace* trace = nullptr) const;
  /// Returns the inverse image and the inverse log-det (= −forward log-det).
  LayerResult inverse(Tape& tape, const Var& y, std::span<const Var> p) const;

 private:
  std::size_t index_;
  std::size_t dim_;
  Partition partition_;
  ClampMode clamp_;
  Conditioner scale_net_;
  Conditioner shift_net_;
};

class LoftLayer {
 public:
  static constexpr double kDefaultTau = 100.0;
  explicit LoftLayer(double tau = kDefaultTau);
  double tau() const noexcept { return tau_; }
  static constexpr std::size_t kParameterCount = 0;
  LayerResult forward(Tape& tape, const Var& z) const;
  LayerResult inverse(Tape& tape, const Var& y) const;

 private:
  double tau_;
};

/// a(z) = σ ⊙ z + μ with σ = exp(log_scale).
class AffineLayer {
 public:
  explicit AffineLayer(std::size_t dim);
  std::vector<ParameterRef> parameters(const std::string& prefix);
  static constexpr std::size_t kParameterCount = 2;
  LayerResult forward(Tape& tape, const Var& z, std::span<const Var> p) const;
  LayerResult inverse(Tape& tape, const Var& y, std::span<const Var> p) const;

 private:
  std::size_t dim_;
  Tensor log_scale_, shift_;
};

using Layer = std::variant<AffineLayer, CouplingLayer, LoftLayer>;

/// Classic: f = f_r ∘ … ∘ f_1 ∘ a.  Proposed: f = a ∘ g ∘ f_r ∘ … ∘ f_1 (g optional).
enum class Ordering { Classic, Proposed };

struct FlowSpec {
  std::size_t dim = 2;
  std::size_t couplings = 8;
  std::size_t hidden = 100;
  ClampMode clamp = ClampMode::none();
  Ordering ordering = Ordering::Classic;
  bool loft = false;
  double tau = LoftLayer::kDefaultTau;
};

struct FlowOutput {
  Var value;
  Var log_det;
};

class FlowStack {
 public:
  FlowStack(const FlowSpec& spec, Rng& init_rng);

  const FlowSpec& spec() const noexcept { return spec_; }
  std::size_t dim() const noexcept { return spec_.dim; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }

  std::vector<ParameterRef> parameters();

  /// Forward through all layers in application order; log-det is per sample.
  FlowOutput forward(Tape& tape, const Var& z, std::span<const Var> p,
                     FlowTrace* trace = nullptr) const;
  /// Exact inverse, layers in reverse order; log-det is that of the inverse map.
  FlowOutput inverse(Tape& tape, const Var& theta, std::span<const Var> p) const;

 private:
  FlowSpec spec_;
  std::vector<Layer> layers_;
};

/// Detached copy of every parameter tensor, in parameters() order.
struct Snapshot {
  std::vector<Tensor> values;
};

/// Variational family q_η: base distribution pushed through a FlowStack.
/// A mean-field Gaussian is the special case of zero couplings with a Gaussian base.
class FlowModel {
 public:
  FlowModel(BaseDistribution base, const FlowSpec& spec, Rng& init_rng);

  BaseDistribution& base() noexcept { return base_; }
  const BaseDistribution& base() const noexcept { return base_; }
  const FlowStack& stack() const noexcept { return stack_; }
  std::size_t dim() const noexcept { return stack_.dim(); }

  std::vector<ParameterRef> parameters();
  std::size_t parameter_count();

  /// Put every parameter on `tape`; as trainable leaves when `trainable`
  /// (respecting per-parameter flags), otherwise as constants.
  std::vector<Var> bind(Tape& tape, bool trainable);

  FlowOutput forward(Tape& tape, const Var& z, std::span<const Var> p,
                     FlowTrace* trace = nullptr) const;
  /// log q0(z) per sample.
  Var base_log_prob(Tape& tape, const Var& z, std::span<const Var> p) const;
  /// log q_η(θ) per sample via the inverse: log q0(f⁻¹(θ)) + log|det J_{f⁻¹}(θ)|.
  Var log_density(Tape& tape, const Var& theta, std::span<const Var> p) const;

  // Value-level conveniences (no gradients).
  struct Samples {
    Tensor base;
    Tensor theta;
    std::vector<double> log_q;
    FlowTrace trace;
  };
  Samples sample(std::size_t batch, Rng& rng);
  Tensor inverse_values(const Tensor& theta);

  Snapshot snapshot();
  void restore(const Snapshot& s);

  /// Overwrite output-layer weights, biases and affine parameters with N(0, scale²) draws.
  void randomize(Rng& rng, double scale);

 private:
  BaseDistribution base_;
  FlowStack stack_;
};

}  // namespace flowvi
