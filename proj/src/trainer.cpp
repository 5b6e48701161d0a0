#include "flowvi/trainer.hpp"

#include <cmath>
#include <limits>

#include "json.hpp"

namespace flowvi {

std::string to_string(GradientMode mode) {
  return mode == GradientMode::Standard ? "standard" : "path";
}

std::string to_string(SnapshotMode mode) {
  return mode == SnapshotMode::Last ? "last" : "best";
}

Annealing Annealing::geometric(std::size_t steps, double beta_min) {
  if (steps == 0) throw ContractViolation("annealing: ramp length must be positive");
  if (!(beta_min > 0.0 && beta_min <= 1.0)) {
    throw ContractViolation("annealing: beta_min must lie in (0, 1]");
  }
  return {true, steps, beta_min};
}

double Annealing::temperature(std::size_t iteration) const {
  if (!enabled || iteration >= steps) return 1.0;
  const double frac = static_cast<double>(iteration) / static_cast<double>(steps);
  return std::pow(beta_min, 1.0 - frac);
}

std::string Annealing::describe() const {
  return enabled ? "geometric:" + std::to_string(steps) : "off";
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch = 128;
  c.iterations = 5000;
  return c;
}

void TrainConfig::validate() const {
  if (batch < 1) throw ContractViolation("train: batch must be at least 1");
  if (iterations < 2) throw ContractViolation("train: need at least 2 iterations");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ContractViolation("train: learning rate must be positive");
  }
  if (log_every < 1) throw ContractViolation("train: log_every must be at least 1");
}

// ---- Adam ---------------------------------------------------------------------------------------

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

void Adam::step(std::span<const ParameterRef> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) throw ContractViolation("adam: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros_like(*p.tensor));
      v_.push_back(Tensor::zeros_like(*p.tensor));
    }
  }
  if (m_.size() != params.size()) throw ContractViolation("adam: parameter set changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].trainable) continue;
    auto w = params[k].tensor->values();
    auto m = m_[k].values();
    auto v = v_[k].values();
    const auto g = grads[k].values();
    if (g.size() != w.size()) throw ContractViolation("adam: gradient shape mismatch for " + params[k].name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ---- objective --------------------------------------------------------------------------------------

LossTerms elbo_loss(Tape& tape, FlowModel& model, const TargetModel& target,
                    std::span<const Var> params, const Tensor& z, GradientMode mode,
                    double beta_temp, FlowTrace* trace) {
  if (!(beta_temp > 0.0 && beta_temp <= 1.0)) {
    throw ContractViolation("elbo_loss: temperature must lie in (0, 1]");
  }
  const Var zv = tape.constant(z);
  const FlowOutput f = model.forward(tape, zv, params, trace);
  const Var log_q = model.base_log_prob(tape, zv, params) - f.log_det;
  const Var log_p = target.log_joint(tape, f.value);
  const Var per_sample = log_q - log_p * beta_temp;
  const Var standard = mean(per_sample);

  LossTerms out;
  out.loss = standard.value().item();
  const auto lq = log_q.value().values();
  const auto lp = log_p.value().values();
  out.log_weights.resize(lq.size());
  for (std::size_t k = 0; k < lq.size(); ++k) out.log_weights[k] = lp[k] - lq[k];
  out.finite = std::isfinite(out.loss) && per_sample.value().all_finite();

  if (mode == GradientMode::Standard) {
    out.objective = standard;
    return out;
  }
  // Path: log q evaluated at frozen parameters, so only θ = f_η(z) carries η.
  try {
    const auto frozen = model.bind(tape, false);
    const Var log_q_frozen = model.log_density(tape, f.value, frozen);
    out.objective = mean(log_q_frozen - log_p * beta_temp);
    out.finite = out.finite && std::isfinite(out.objective.value().item());
  } catch (const DomainError&) {
    out.objective = standard;
    out.finite = false;
  }
  return out;
}

namespace {

std::vector<double> flatten(const Gradients& g, std::span<const Var> params) {
  std::vector<double> flat;
  for (const Var& p : params) {
    const auto v = g.of(p).values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return flat;
}

Tensor row_of(const Tensor& z, std::size_t k) {
  Tensor r({1, z.cols()});
  for (std::size_t j = 0; j < z.cols(); ++j) r(0, j) = z(k, j);
  return r;
}

}  // namespace

std::vector<std::vector<double>> per_sample_gradients(FlowModel& model, const TargetModel& target,
                                                      const Tensor& z, GradientMode mode) {
  std::vector<std::vector<double>> out;
  out.reserve(z.rows());
  for (std::size_t k = 0; k < z.rows(); ++k) out.push_back(batch_gradient(model, target, row_of(z, k), mode));
  return out;
}

std::vector<double> batch_gradient(FlowModel& model, const TargetModel& target, const Tensor& z,
                                   GradientMode mode) {
  Tape tape;
  const auto params = model.bind(tape, true);
  const LossTerms terms = elbo_loss(tape, model, target, params, z, mode);
  return flatten(tape.backward(terms.objective), params);
}

std::vector<std::size_t> traced_layers(std::size_t couplings) {
  std::vector<std::size_t> out;
  if (couplings == 0) return out;
  for (std::size_t l : {4u, 32u, 64u}) {
    const std::size_t c = std::min<std::size_t>(l, couplings);
    if (out.empty() || out.back() != c) out.push_back(c);
  }
  return out;
}

// ---- training loop -----------------------------------------------------------------------------------

void RunRecord::write_jsonl(std::ostream& out) const {
  using nlohmann::json;
  for (const TraceRow& row : trace) {
    json j;
    j["iteration"] = row.iteration;
    j["loss"] = row.loss;
    j["skipped"] = row.skipped;
    j["input_max_abs"] = row.input_max_abs;
    json layers = json::object();
    for (std::size_t l : traced) {
      if (l - 1 < row.coupling_max_abs.size()) {
        layers["layer" + std::to_string(l)] = row.coupling_max_abs[l - 1];
      }
    }
    j["max_abs"] = layers;
    out << j.dump() << '\n';
  }
  json summary;
  summary["iterations"] = losses.size();
  summary["skipped"] = skipped;
  summary["gradient"] = to_string(config.gradient);
  summary["snapshot"] = to_string(config.snapshot);
  summary["final_loss"] = losses.empty() ? std::numeric_limits<double>::quiet_NaN() : losses.back();
  if (best_iteration) {
    summary["best_iteration"] = *best_iteration;
    summary["best_loss"] = best_loss;
  } else {
    summary["best_iteration"] = nullptr;
    summary["best_loss"] = nullptr;
  }
  out << json{{"summary", summary}}.dump() << '\n';
}

RunRecord train(const TrainConfig& config, FlowModel& model, const TargetModel& target) {
  config.validate();
  if (model.dim() != target.dim()) {
    throw ContractViolation("train: flow dim " + std::to_string(model.dim()) + " vs target dim " +
                            std::to_string(target.dim()));
  }
  RunRecord record;
  record.config = config;
  record.traced = traced_layers(model.stack().spec().couplings);
  record.losses.reserve(config.iterations);

  Rng rng(derive_seed(config.seed, 0x5eed));
  Adam adam(config.learning_rate);
  const auto refs = model.parameters();
  const std::size_t window_start = config.iterations / 2;

  for (std::size_t t = 0; t < config.iterations; ++t) {
    const Tensor z = model.base().sample(config.batch, rng);
    const bool log_row = t % config.log_every == 0 || t + 1 == config.iterations;
    FlowTrace flow_trace;

    Tape tape;
    const auto params = model.bind(tape, true);
    LossTerms terms;
    bool ok = true;
    try {
      terms = elbo_loss(tape, model, target, params, z, config.gradient,
                        config.anneal.temperature(t), &flow_trace);
      ok = terms.finite;
    } catch (const DomainError&) {
      ok = false;
    }
    std::vector<Tensor> grads;
    if (ok) {
      const Gradients g = tape.backward(terms.objective);
      grads.reserve(params.size());
      for (const Var& p : params) {
        grads.push_back(g.of(p));
        ok = ok && grads.back().all_finite();
      }
    }

    if (!ok) {
      ++record.skipped;
      record.losses.push_back(std::numeric_limits<double>::quiet_NaN());
    } else {
      record.losses.push_back(terms.loss);
      if (t >= window_start && (!record.best_iteration || terms.loss < record.best_loss)) {
        record.best_iteration = t;
        record.best_loss = terms.loss;
        record.best_parameters = model.snapshot();
      }
      adam.step(refs, grads);
    }

    if (log_row) {
      TraceRow row;
      row.iteration = t;
      row.loss = record.losses.back();
      row.skipped = record.skipped;
      row.input_max_abs = flow_trace.input_max_abs;
      for (const auto& c : flow_trace.couplings) row.coupling_max_abs.push_back(c.max_abs_output);
      record.trace.push_back(std::move(row));
    }
  }

  record.final_parameters = model.snapshot();
  if (config.snapshot == SnapshotMode::LowestLossSecondHalf && record.best_parameters) {
    model.restore(*record.best_parameters);
  }
  return record;
}

FlowModel make_meanfield(std::size_t dim) {
  FlowSpec spec;
  spec.dim = dim;
  spec.couplings = 0;
  spec.ordering = Ordering::Classic;
  Rng unused(0);
  return FlowModel(BaseDistribution::gaussian(dim), spec, unused);
}

}  // namespace flowvi
