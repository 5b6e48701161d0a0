#include "flowvi/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace flowvi {

namespace {
constexpr double kTwoOverPi = 2.0 / std::numbers::pi;
constexpr double kLoftInverseLimit = 700.0;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

Var zeros_per_sample(Tape& tape, const Var& z) {
  return tape.constant(Tensor({z.value().rows()}, 0.0));
}
}  // namespace

// ---- clamp ---------------------------------------------------------------------------

ClampMode ClampMode::arctan_sym(double alpha) {
  if (!(alpha > 0.0)) throw ContractViolation("ArcTanSym clamp requires alpha > 0");
  return {Kind::ArcTanSym, alpha, alpha};
}

ClampMode ClampMode::asym_soft(double alpha_neg, double alpha_pos) {
  if (!(alpha_pos > 0.0) || !(alpha_neg > alpha_pos)) {
    throw ContractViolation("AsymSoft clamp requires alpha_neg > alpha_pos > 0");
  }
  return {Kind::AsymSoft, alpha_neg, alpha_pos};
}

std::string ClampMode::name() const {
  switch (kind) {
    case Kind::None: return "none";
    case Kind::Tanh: return "tanh";
    case Kind::ArcTanSym: return "arctan_sym";
    case Kind::AsymSoft: return "asym_soft";
  }
  return "unknown";
}

double ClampMode::lower_bound() const {
  switch (kind) {
    case Kind::None: return -std::numeric_limits<double>::infinity();
    case Kind::Tanh: return -1.0;
    case Kind::ArcTanSym:
    case Kind::AsymSoft: return -alpha_neg;
  }
  return 0.0;
}

double ClampMode::upper_bound() const {
  switch (kind) {
    case Kind::None: return std::numeric_limits<double>::infinity();
    case Kind::Tanh: return 1.0;
    case Kind::ArcTanSym: return alpha_neg;
    case Kind::AsymSoft: return alpha_pos;
  }
  return 0.0;
}

double clamp_value(double s, const ClampMode& mode) {
  switch (mode.kind) {
    case ClampMode::Kind::None: return s;
    case ClampMode::Kind::Tanh: return std::tanh(s);
    case ClampMode::Kind::ArcTanSym:
      return kTwoOverPi * mode.alpha_neg * std::atan(s / mode.alpha_neg);
    case ClampMode::Kind::AsymSoft: {
      const double alpha = s >= 0.0 ? mode.alpha_pos : mode.alpha_neg;
      return kTwoOverPi * alpha * std::atan(s / alpha);
    }
  }
  return s;
}

Var clamp(const Var& s, const ClampMode& mode) {
  switch (mode.kind) {
    case ClampMode::Kind::None: return s;
    case ClampMode::Kind::Tanh: return tanh(s);
    case ClampMode::Kind::ArcTanSym:
      return atan(s * (1.0 / mode.alpha_neg)) * (kTwoOverPi * mode.alpha_neg);
    case ClampMode::Kind::AsymSoft: {
      // Positive part through max(s, 0); the negative part is s − max(s, 0) so
      // that at s = 0 only one branch carries slope.
      const Var pos = max(s, 0.0);
      const Var negative = s - pos;
      return atan(pos * (1.0 / mode.alpha_pos)) * (kTwoOverPi * mode.alpha_pos) +
             atan(negative * (1.0 / mode.alpha_neg)) * (kTwoOverPi * mode.alpha_neg);
    }
  }
  return s;
}

// ---- LOFT ------------------------------------------------------------------------------

double loft_value(double z, double tau) {
  const double a = std::abs(z);
  const double sgn = z > 0.0 ? 1.0 : (z < 0.0 ? -1.0 : 0.0);
  return sgn * (std::log1p(std::max(a - tau, 0.0)) + std::min(a, tau));
}

double loft_inverse_value(double y, double tau) {
  const double a = std::abs(y);
  const double excess = std::max(a - tau, 0.0);
  if (excess > kLoftInverseLimit) throw DomainError("LOFT inverse overflow: |y| - tau > 700", y);
  const double sgn = y > 0.0 ? 1.0 : (y < 0.0 ? -1.0 : 0.0);
  return sgn * (std::expm1(excess) + std::min(a, tau));
}

double loft_log_derivative(double z, double tau) {
  return -std::log1p(std::max(std::abs(z) - tau, 0.0));
}

Var loft(const Var& z, double tau) {
  const Tensor& x = z.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = loft_value(x[i], tau);
  return z.tape()->record(std::move(y), {z.id()}, [tau](const Tensor& g, BackwardContext& ctx) {
    const Tensor& xin = ctx.input(0);
    Tensor dx(xin.shape());
    for (std::size_t i = 0; i < xin.size(); ++i) {
      dx[i] = g[i] / (1.0 + std::max(std::abs(xin[i]) - tau, 0.0));
    }
    ctx.accumulate(0, dx);
  });
}

Var loft_inverse(const Var& y, double tau) {
  const Tensor& x = y.value();
  Tensor z(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = loft_inverse_value(x[i], tau);
  return y.tape()->record(std::move(z), {y.id()}, [tau](const Tensor& g, BackwardContext& ctx) {
    const Tensor& xin = ctx.input(0);
    Tensor dx(xin.shape());
    for (std::size_t i = 0; i < xin.size(); ++i) {
      dx[i] = g[i] * std::exp(std::max(std::abs(xin[i]) - tau, 0.0));
    }
    ctx.accumulate(0, dx);
  });
}

// ---- partition / conditioner ---------------------------------------------------------------

Partition coupling_partition(std::size_t dim, std::size_t layer_index) {
  if (layer_index == 0) throw ContractViolation("coupling layer index is 1-based");
  std::vector<std::size_t> s0, s1;
  for (std::size_t j = 0; j < dim; ++j) (j % 2 == 0 ? s0 : s1).push_back(j);
  // A = S_{(i+1) mod 2}, B = S_{i mod 2}
  if (layer_index % 2 == 1) return {s0, s1};
  return {s1, s0};
}

Conditioner::Conditioner(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
    : in_(in),
      hidden_(hidden),
      out_(out),
      w1_({in, hidden}),
      b1_({hidden}),
      w2_({hidden, out}, 0.0),
      b2_({out}, 0.0) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(in, 1)));
  for (double& v : w1_.values()) v = bound * (2.0 * rng.uniform() - 1.0);
  for (double& v : b1_.values()) v = bound * (2.0 * rng.uniform() - 1.0);
}

std::vector<ParameterRef> Conditioner::parameters(const std::string& prefix) {
  return {{prefix + ".w1", &w1_, true},
          {prefix + ".b1", &b1_, true},
          {prefix + ".w2", &w2_, true},
          {prefix + ".b2", &b2_, true}};
}

Var Conditioner::forward(const Var& x, std::span<const Var> p) const {
  const Var h = relu(add_row(matmul(x, p[0]), p[1]));
  return add_row(matmul(h, p[2]), p[3]);
}

// ---- coupling ------------------------------------------------------------------------------

CouplingLayer::CouplingLayer(std::size_t index, std::size_t dim, std::size_t hidden,
                             ClampMode clamp, Rng& rng)
    : index_(index),
      dim_(dim),
      partition_(coupling_partition(dim, index)),
      clamp_(clamp),
      scale_net_(partition_.conditioned.size(), hidden, partition_.transformed.size(), rng),
      shift_net_(partition_.conditioned.size(), hidden, partition_.transformed.size(), rng) {
  if (dim < 2) throw ContractViolation("coupling layers need dim >= 2");
}

std::vector<ParameterRef> CouplingLayer::parameters(const std::string& prefix) {
  auto p = scale_net_.parameters(prefix + ".s");
  auto t = shift_net_.parameters(prefix + ".t");
  p.insert(p.end(), t.begin(), t.end());
  return p;
}

LayerResult CouplingLayer::forward(Tape& tape, const Var& z, std::span<const Var> p,
                                   CouplingTrace* trace) const {
  (void)tape;
  const Var za = select_cols(z, partition_.conditioned);
  const Var zb = select_cols(z, partition_.transformed);
  const Var s = clamp(scale_net_.forward(za, p.subspan(0, 4)), clamp_);
  const Var t = shift_net_.forward(za, p.subspan(4, 4));
  const Var zb_new = mul(zb, exp(s)) + t;
  const Var out = merge_cols(za, partition_.conditioned, zb_new, partition_.transformed, dim_);
  if (trace) {
    trace->max_abs_output = out.value().max_abs();
    trace->max_abs_shift = t.value().max_abs();
    double m = 0.0;
    for (double v : s.value().values()) m = std::max(m, std::exp(v));
    trace->max_scale = m;
  }
  return {out, sum_rows(s)};
}

LayerResult CouplingLayer::inverse(Tape& tape, const Var& y, std::span<const Var> p) const {
  (void)tape;
  const Var ya = select_cols(y, partition_.conditioned);
  const Var yb = select_cols(y, partition_.transformed);
  const Var s = clamp(scale_net_.forward(ya, p.subspan(0, 4)), clamp_);
  const Var t = shift_net_.forward(ya, p.subspan(4, 4));
  const Var zb = mul(yb - t, exp(-s));
  const Var out = merge_cols(ya, partition_.conditioned, zb, partition_.transformed, dim_);
  return {out, -sum_rows(s)};
}

// ---- LOFT layer ------------------------------------------------------------------------------

LoftLayer::LoftLayer(double tau) : tau_(tau) {
  if (!(tau > 0.0)) throw ContractViolation("LOFT threshold must be positive");
}

LayerResult LoftLayer::forward(Tape& tape, const Var& z) const {
  (void)tape;
  const Var excess = max(abs(z) - tau_, 0.0);
  return {loft(z, tau_), -sum_rows(log1p(excess))};
}

LayerResult LoftLayer::inverse(Tape& tape, const Var& y) const {
  (void)tape;
  const Var excess = max(abs(y) - tau_, 0.0);
  return {loft_inverse(y, tau_), sum_rows(excess)};
}

// ---- affine -----------------------------------------------------------------------------------

AffineLayer::AffineLayer(std::size_t dim) : dim_(dim), log_scale_({dim}, 0.0), shift_({dim}, 0.0) {}

std::vector<ParameterRef> AffineLayer::parameters(const std::string& prefix) {
  return {{prefix + ".log_scale", &log_scale_, true}, {prefix + ".shift", &shift_, true}};
}

LayerResult AffineLayer::forward(Tape& tape, const Var& z, std::span<const Var> p) const {
  const Var out = add_row(mul_row(z, exp(p[0])), p[1]);
  return {out, zeros_per_sample(tape, z) + sum(p[0])};
}

LayerResult AffineLayer::inverse(Tape& tape, const Var& y, std::span<const Var> p) const {
  const Var out = mul_row(add_row(y, -p[1]), exp(-p[0]));
  return {out, zeros_per_sample(tape, y) - sum(p[0])};
}

// ---- stack ------------------------------------------------------------------------------------

namespace {
std::size_t layer_parameter_count(const Layer& layer) {
  return std::visit(Overloaded{[](const AffineLayer&) { return AffineLayer::kParameterCount; },
                               [](const CouplingLayer&) { return CouplingLayer::kParameterCount; },
                               [](const LoftLayer&) { return LoftLayer::kParameterCount; }},
                    layer);
}
}  // namespace

FlowStack::FlowStack(const FlowSpec& spec, Rng& init_rng) : spec_(spec) {
  if (spec.dim == 0) throw ContractViolation("FlowStack: dim must be positive");
  if (spec.couplings > 0 && spec.dim < 2) {
    throw ContractViolation("FlowStack: coupling layers need dim >= 2");
  }
  if (spec.ordering == Ordering::Classic) {
    layers_.emplace_back(AffineLayer(spec.dim));
    if (spec.loft) throw ContractViolation("FlowStack: LOFT is only placed in the proposed ordering");
  }
  for (std::size_t i = 1; i <= spec.couplings; ++i) {
    layers_.emplace_back(CouplingLayer(i, spec.dim, spec.hidden, spec.clamp, init_rng));
  }
  if (spec.ordering == Ordering::Proposed) {
    if (spec.loft) layers_.emplace_back(LoftLayer(spec.tau));
    layers_.emplace_back(AffineLayer(spec.dim));
  }
}

std::vector<ParameterRef> FlowStack::parameters() {
  std::vector<ParameterRef> out;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const std::string prefix = "layer" + std::to_string(k);
    std::visit(Overloaded{[&](AffineLayer& l) {
                            auto p = l.parameters(prefix + ".affine");
                            out.insert(out.end(), p.begin(), p.end());
                          },
                          [&](CouplingLayer& l) {
                            auto p = l.parameters(prefix + ".coupling");
                            out.insert(out.end(), p.begin(), p.end());
                          },
                          [](LoftLayer&) {}},
               layers_[k]);
  }
  return out;
}

FlowOutput FlowStack::forward(Tape& tape, const Var& z, std::span<const Var> p,
                              FlowTrace* trace) const {
  Var current = z;
  Var log_det = zeros_per_sample(tape, z);
  std::size_t offset = 0;
  bool entered_couplings = false;
  if (trace) *trace = FlowTrace{};
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const Layer& layer = layers_[k];
    const std::size_t count = layer_parameter_count(layer);
    const auto lp = p.subspan(offset, count);
    offset += count;
    LayerResult r = std::visit(
        Overloaded{[&](const AffineLayer& l) { return l.forward(tape, current, lp); },
                   [&](const CouplingLayer& l) {
                     CouplingTrace* ct = nullptr;
                     if (trace) {
                       if (!entered_couplings) trace->input_max_abs = current.value().max_abs();
                       trace->couplings.emplace_back();
                       ct = &trace->couplings.back();
                     }
                     entered_couplings = true;
                     return l.forward(tape, current, lp, ct);
                   },
                   [&](const LoftLayer& l) { return l.forward(tape, current); }},
        layer);
    current = r.value;
    log_det = log_det + r.log_det;
    if (trace && !trace->nonfinite_layer && !current.value().all_finite()) {
      trace->nonfinite_layer = k + 1;
    }
  }
  if (trace) trace->output_max_abs = current.value().max_abs();
  return {current, log_det};
}

FlowOutput FlowStack::inverse(Tape& tape, const Var& theta, std::span<const Var> p) const {
  std::vector<std::size_t> offsets(layers_.size());
  std::size_t offset = 0;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    offsets[k] = offset;
    offset += layer_parameter_count(layers_[k]);
  }
  Var current = theta;
  Var log_det = zeros_per_sample(tape, theta);
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const auto lp = p.subspan(offsets[k], layer_parameter_count(layers_[k]));
    LayerResult r =
        std::visit(Overloaded{[&](const AffineLayer& l) { return l.inverse(tape, current, lp); },
                              [&](const CouplingLayer& l) { return l.inverse(tape, current, lp); },
                              [&](const LoftLayer& l) { return l.inverse(tape, current); }},
                   layers_[k]);
    current = r.value;
    log_det = log_det + r.log_det;
  }
  return {current, log_det};
}

// ---- model ------------------------------------------------------------------------------------

FlowModel::FlowModel(BaseDistribution base, const FlowSpec& spec, Rng& init_rng)
    : base_(std::move(base)), stack_(spec, init_rng) {
  if (base_.dim() != spec.dim) throw ContractViolation("FlowModel: base and flow dims differ");
}

std::vector<ParameterRef> FlowModel::parameters() {
  auto p = base_.parameters();
  auto s = stack_.parameters();
  p.insert(p.end(), s.begin(), s.end());
  return p;
}

std::size_t FlowModel::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor->size();
  return n;
}

std::vector<Var> FlowModel::bind(Tape& tape, bool trainable) {
  std::vector<Var> vars;
  for (const auto& p : parameters()) {
    vars.push_back(trainable && p.trainable ? tape.parameter(*p.tensor) : tape.constant(*p.tensor));
  }
  return vars;
}

FlowOutput FlowModel::forward(Tape& tape, const Var& z, std::span<const Var> p,
                              FlowTrace* trace) const {
  return stack_.forward(tape, z, p.subspan(base_.parameter_count()), trace);
}

Var FlowModel::base_log_prob(Tape& tape, const Var& z, std::span<const Var> p) const {
  return base_.log_prob(tape, z, p.subspan(0, base_.parameter_count()));
}

Var FlowModel::log_density(Tape& tape, const Var& theta, std::span<const Var> p) const {
  const FlowOutput inv = stack_.inverse(tape, theta, p.subspan(base_.parameter_count()));
  return base_log_prob(tape, inv.value, p) + inv.log_det;
}

FlowModel::Samples FlowModel::sample(std::size_t batch, Rng& rng) {
  Tape tape;
  const auto p = bind(tape, false);
  Samples out;
  out.base = base_.sample(batch, rng);
  const Var z = tape.constant(out.base);
  const FlowOutput f = forward(tape, z, p, &out.trace);
  const Var log_q = base_log_prob(tape, z, p) - f.log_det;
  out.theta = f.value.value();
  out.log_q = log_q.value().storage();
  return out;
}

Tensor FlowModel::inverse_values(const Tensor& theta) {
  Tape tape;
  const auto p = bind(tape, false);
  return stack_.inverse(tape, tape.constant(theta), std::span<const Var>(p).subspan(base_.parameter_count()))
      .value.value();
}

Snapshot FlowModel::snapshot() {
  Snapshot s;
  for (const auto& p : parameters()) s.values.push_back(*p.tensor);
  return s;
}

void FlowModel::restore(const Snapshot& s) {
  auto params = parameters();
  if (params.size() != s.values.size()) throw ContractViolation("restore: parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].tensor->same_shape(s.values[k])) {
      throw ContractViolation("restore: shape mismatch for " + params[k].name);
    }
    *params[k].tensor = s.values[k];
  }
}

void FlowModel::randomize(Rng& rng, double scale) {
  for (auto& p : parameters()) {
    const std::string& n = p.name;
    const bool output_layer = n.ends_with(".w2") || n.ends_with(".b2");
    const bool affine = n.find(".affine.") != std::string::npos;
    if (!output_layer && !affine) continue;
    for (double& v : p.tensor->values()) v = scale * rng.normal();
  }
}

}  // namespace flowvi
