#include "flowvi/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace flowvi {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kSampleStream = 0;
constexpr std::uint64_t kReferenceStream = 1u << 20;
constexpr std::uint64_t kProjectionStream = 2u << 20;

nlohmann::json to_json(const MeanStd& m) {
  return {{"mean", m.mean}, {"std", m.std}, {"repeats", m.count}};
}

// Percentile by linear interpolation between order statistics.
double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<std::size_t> choose_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(k);
  return idx;
}

struct RepeatResult {
  double elbo = kNaN;
  double log_marginal = kNaN;
  double swd = kNaN;
  std::size_t nonfinite = 0;
  bool dropped = false;
};

RepeatResult run_repeat(FlowModel& model, const TargetModel& target, const EvalConfig& config,
                        std::size_t r, bool with_swd) {
  Rng rng(derive_seed(config.seed, kSampleStream + r));
  Tensor theta;
  const auto w = log_weights(model, target, config.samples, rng, config.chunk,
                             with_swd ? &theta : nullptr);
  RepeatResult out;
  std::vector<double> finite;
  finite.reserve(w.size());
  for (double x : w) {
    if (std::isfinite(x)) finite.push_back(x);
  }
  out.nonfinite = w.size() - finite.size();
  if (finite.empty() || static_cast<double>(out.nonfinite) > 0.01 * static_cast<double>(w.size())) {
    out.dropped = true;
    return out;
  }
  out.elbo = std::accumulate(finite.begin(), finite.end(), 0.0) / static_cast<double>(finite.size());
  out.log_marginal = log_mean_exp(finite);
  if (with_swd && theta.all_finite()) {
    Rng ref_rng(derive_seed(config.seed, kReferenceStream + r));
    const Tensor reference = target.sample_posterior(config.samples, ref_rng);
    Rng proj_rng(derive_seed(config.seed, kProjectionStream + r));
    out.swd = sliced_wasserstein(theta, reference, config.projections, proj_rng);
  }
  return out;
}

}  // namespace

void EvalConfig::validate() const {
  if (samples < 2) throw ContractViolation("eval: b_eval must be at least 2");
  if (repeats < 2) throw ContractViolation("eval: repeats must be at least 2");
  if (projections < 1) throw ContractViolation("eval: need at least one projection");
  if (chunk < 1) throw ContractViolation("eval: chunk must be positive");
}

MeanStd summarize(std::span<const double> values) {
  MeanStd m;
  double sum = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) {
      sum += v;
      ++m.count;
    }
  }
  if (m.count == 0) return {kNaN, kNaN, 0};
  m.mean = sum / static_cast<double>(m.count);
  if (m.count < 2) {
    m.std = 0.0;
    return m;
  }
  double ss = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) ss += (v - m.mean) * (v - m.mean);
  }
  m.std = std::sqrt(ss / static_cast<double>(m.count - 1));
  return m;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["elbo"] = flowvi::to_json(elbo);
  j["log_marginal_is"] = flowvi::to_json(log_marginal);
  j["swd"] = swd ? flowvi::to_json(*swd) : nlohmann::json(nullptr);
  j["true_log_marginal"] = true_log_marginal ? nlohmann::json(*true_log_marginal) : nlohmann::json(nullptr);
  j["nonfinite"] = nonfinite;
  j["dropped_repeats"] = dropped_repeats;
  return j;
}

std::vector<double> log_weights(FlowModel& model, const TargetModel& target, std::size_t n,
                                Rng& rng, std::size_t chunk, Tensor* theta) {
  if (model.dim() != target.dim()) throw ContractViolation("log_weights: dimension mismatch");
  std::vector<double> w;
  w.reserve(n);
  if (theta) *theta = Tensor({n, model.dim()});
  std::size_t done = 0;
  while (done < n) {
    const std::size_t m = std::min(chunk, n - done);
    const Tensor z = model.base().sample(m, rng);
    Tape tape;
    const auto p = model.bind(tape, false);
    try {
      const Var zv = tape.constant(z);
      const FlowOutput f = model.forward(tape, zv, p);
      const Var log_q = model.base_log_prob(tape, zv, p) - f.log_det;
      const Var log_p = target.log_joint(tape, f.value);
      for (std::size_t k = 0; k < m; ++k) w.push_back(log_p.value()[k] - log_q.value()[k]);
      if (theta) {
        const Tensor& tv = f.value.value();
        std::copy(tv.values().begin(), tv.values().end(),
                  theta->values().begin() + static_cast<std::ptrdiff_t>(done * model.dim()));
      }
    } catch (const DomainError&) {
      w.insert(w.end(), m, kNaN);
      if (theta) {
        std::fill_n(theta->values().begin() + static_cast<std::ptrdiff_t>(done * model.dim()),
                    m * model.dim(), kNaN);
      }
    }
    done += m;
  }
  return w;
}

double log_mean_exp(std::span<const double> w) {
  if (w.empty()) throw ContractViolation("log_mean_exp: empty input");
  const double mx = *std::max_element(w.begin(), w.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : w) s += std::exp(x - mx);
  return mx + std::log(s) - std::log(static_cast<double>(w.size()));
}

EvalReport evaluate(FlowModel& model, const TargetModel& target, const EvalConfig& config) {
  config.validate();
  const bool with_swd = target.has_exact_sampler();
  std::vector<double> elbo, logml, swd;
  EvalReport report;
  report.true_log_marginal = target.true_log_marginal();
  for (std::size_t r = 0; r < config.repeats; ++r) {
    const RepeatResult res = run_repeat(model, target, config, r, with_swd);
    report.nonfinite += res.nonfinite;
    if (res.dropped) {
      ++report.dropped_repeats;
      continue;
    }
    elbo.push_back(res.elbo);
    logml.push_back(res.log_marginal);
    swd.push_back(res.swd);
  }
  report.elbo = summarize(elbo);
  report.log_marginal = summarize(logml);
  if (with_swd) report.swd = summarize(swd);
  return report;
}

MeanStd estimate_elbo(FlowModel& model, const TargetModel& target, const EvalConfig& config) {
  config.validate();
  std::vector<double> v;
  for (std::size_t r = 0; r < config.repeats; ++r) {
    const RepeatResult res = run_repeat(model, target, config, r, false);
    if (!res.dropped) v.push_back(res.elbo);
  }
  return summarize(v);
}

MeanStd estimate_log_marginal_is(FlowModel& model, const TargetModel& target,
                                 const EvalConfig& config) {
  config.validate();
  std::vector<double> v;
  for (std::size_t r = 0; r < config.repeats; ++r) {
    const RepeatResult res = run_repeat(model, target, config, r, false);
    if (!res.dropped) v.push_back(res.log_marginal);
  }
  return summarize(v);
}

// ---- sliced Wasserstein ------------------------------------------------------------------------

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw ContractViolation("wasserstein_1d: needs equal, non-zero sample counts");
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(ss / static_cast<double>(a.size()));
}

double sliced_wasserstein(const Tensor& a, const Tensor& b, std::size_t projections, Rng& rng) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw ContractViolation("sliced_wasserstein: dimension mismatch (" + a.shape_string() + " vs " +
                            b.shape_string() + ")");
  }
  if (a.rows() < 2 || b.rows() < 2) throw ContractViolation("sliced_wasserstein: need ≥ 2 samples each");
  if (projections == 0) throw ContractViolation("sliced_wasserstein: need at least one projection");
  const std::size_t n = std::min(a.rows(), b.rows());
  const std::size_t d = a.cols();
  const auto rows_a = a.rows() > n ? choose_without_replacement(a.rows(), n, rng)
                                   : choose_without_replacement(n, n, rng);
  const auto rows_b = b.rows() > n ? choose_without_replacement(b.rows(), n, rng)
                                   : choose_without_replacement(n, n, rng);
  std::vector<double> u(d), pa(n), pb(n);
  double total = 0.0;
  for (std::size_t k = 0; k < projections; ++k) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& x : u) {
        x = rng.normal();
        norm += x * x;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& x : u) x /= norm;
    for (std::size_t i = 0; i < n; ++i) {
      double sa = 0.0;
      double sb = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        sa += a(rows_a[i], j) * u[j];
        sb += b(rows_b[i], j) * u[j];
      }
      pa[i] = sa;
      pb[i] = sb;
    }
    total += wasserstein_1d(pa, pb);
  }
  return total / static_cast<double>(projections);
}

// ---- correlation -----------------------------------------------------------------------------------

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractViolation("pearson: need matched pairs");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return kNaN;
  return sxy / std::sqrt(sxx * syy);
}

Correlation pearson_bootstrap(std::span<const double> x, std::span<const double> y,
                              std::size_t resamples, Rng& rng) {
  if (x.size() < 3) throw ContractViolation("correlation: need at least 3 points");
  Correlation c;
  c.rho = pearson(x, y);
  std::vector<double> draws;
  draws.reserve(resamples);
  std::vector<double> bx(x.size()), by(x.size());
  for (std::size_t b = 0; b < resamples; ++b) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t k = rng.index(x.size());
      bx[i] = x[k];
      by[i] = y[k];
    }
    const double r = pearson(bx, by);
    if (std::isfinite(r)) draws.push_back(r);
  }
  if (draws.empty()) {
    c.lower = c.upper = c.rho;
  } else {
    c.lower = percentile(draws, 0.025);
    c.upper = percentile(draws, 0.975);
  }
  return c;
}

ElboErrorCorrelation elbo_vs_error_correlation(std::span<const EvalReport> reports,
                                               std::size_t resamples, std::uint64_t seed) {
  if (reports.size() < 3) throw ContractViolation("elbo_vs_error_correlation: need at least 3 reports");
  std::vector<double> elbo, err, neg_abs;
  for (const auto& r : reports) {
    if (!r.true_log_marginal) {
      throw ContractViolation("elbo_vs_error_correlation: every report needs a known log Z");
    }
    elbo.push_back(r.elbo.mean);
    const double e = r.log_marginal.mean - *r.true_log_marginal;
    err.push_back(e);
    neg_abs.push_back(-std::abs(e));
  }
  ElboErrorCorrelation out;
  Rng rng_a(derive_seed(seed, 0));
  Rng rng_b(derive_seed(seed, 1));
  out.signed_error = pearson_bootstrap(elbo, err, resamples, rng_a);
  out.neg_abs_error = pearson_bootstrap(elbo, neg_abs, resamples, rng_b);
  return out;
}

}  // namespace flowvi
