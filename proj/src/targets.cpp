#include "flowvi/targets.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "flowvi/special.hpp"

namespace flowvi {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
const double kLogPi = std::log(std::numbers::pi);

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> r;
  for (std::size_t i = begin; i < end; ++i) r.push_back(i);
  return r;
}

Matrix to_eigen(const Tensor& t) {
  Matrix m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
  }
  return m;
}

Tensor transpose(const Tensor& t) {
  Tensor out({t.cols(), t.rows()});
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) out(j, i) = t(i, j);
  }
  return out;
}

void check_theta(const Var& theta, std::size_t dim, const std::string& who) {
  const Tensor& v = theta.value();
  if (v.rank() != 2 || v.cols() != dim) {
    throw ContractViolation(who + ": expected (batch × " + std::to_string(dim) + "), got " +
                            v.shape_string());
  }
}

// log σ(x) = −softplus(−x): log-Jacobian of the softplus transform.
Var softplus_log_jacobian(const Var& raw) { return -softplus(-raw); }

// log C+(x; 0, s) elementwise.
Var half_cauchy_log_pdf(const Var& x, double scale) {
  return -log1p(square(x * (1.0 / scale))) + std::log(2.0 / (std::numbers::pi * scale));
}

Matrix correlation_matrix(std::size_t d, double base) {
  Matrix c(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      c(i, j) = std::pow(base, std::abs(static_cast<double>(i) - static_cast<double>(j)));
    }
  }
  return c;
}

}  // namespace

Tensor TargetModel::sample_posterior(std::size_t, Rng&) const {
  throw ContractViolation(name() + ": no exact posterior sampler");
}

double TargetModel::log_joint_at(std::span<const double> theta) const {
  Tape tape;
  const Var t = tape.constant(Tensor({1, theta.size()}, std::vector<double>(theta.begin(), theta.end())));
  return log_joint(tape, t).value()[0];
}

// ---- standard normal ----------------------------------------------------------------------

StandardNormalTarget::StandardNormalTarget(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw ContractViolation("stdnormal: dim must be positive");
}

Var StandardNormalTarget::log_joint(Tape& tape, const Var& theta) const {
  check_theta(theta, dim_, "stdnormal");
  return sum_rows(square(theta)) * -0.5 + tape.constant(-0.5 * static_cast<double>(dim_) * kLog2Pi);
}

Tensor StandardNormalTarget::sample_posterior(std::size_t n, Rng& rng) const {
  return rng.normal_matrix(n, dim_);
}

// ---- funnel --------------------------------------------------------------------------------

FunnelTarget::FunnelTarget(std::size_t dim) : dim_(dim) {
  if (dim < 2) throw ContractViolation("funnel: dim must be at least 2");
}

Var FunnelTarget::log_joint(Tape& tape, const Var& theta) const {
  check_theta(theta, dim_, "funnel");
  const double rest_dim = static_cast<double>(dim_ - 1);
  const Var first = column(theta, 0);
  const auto rest_cols = range(1, dim_);
  const Var rest = select_cols(theta, rest_cols);
  const Var head = square(first) * (-1.0 / 18.0) + tape.constant(-0.5 * std::log(2.0 * std::numbers::pi * 9.0));
  const Var tail = (first * -0.5 * rest_dim - 0.5 * rest_dim * kLog2Pi) -
                   mul(sum_rows(square(rest)), exp(-first)) * 0.5;
  return head + tail;
}

Tensor FunnelTarget::sample_posterior(std::size_t n, Rng& rng) const {
  Tensor out({n, dim_});
  for (std::size_t i = 0; i < n; ++i) {
    const double first = 3.0 * rng.normal();
    out(i, 0) = first;
    const double sd = std::exp(0.5 * first);
    for (std::size_t j = 1; j < dim_; ++j) out(i, j) = sd * rng.normal();
  }
  return out;
}

// ---- multivariate t ------------------------------------------------------------------------

MultivariateTTarget::MultivariateTTarget(std::size_t dim, double dof, double correlation)
    : dim_(dim), dof_(dof), rho_(correlation) {
  if (dim == 0) throw ContractViolation("mvt: dim must be positive");
  if (!(dof > 0.0)) throw ContractViolation("mvt: dof must be positive");
  const double lower = dim > 1 ? -1.0 / static_cast<double>(dim - 1) : -1.0;
  if (!(correlation < 1.0 && correlation > lower)) {
    throw ContractViolation("mvt: correlation makes the scale matrix singular");
  }
}

double MultivariateTTarget::log_det_scale() const {
  const double d = static_cast<double>(dim_);
  return (d - 1.0) * std::log1p(-rho_) + std::log1p((d - 1.0) * rho_);
}

Tensor MultivariateTTarget::scale_inverse() const {
  const double d = static_cast<double>(dim_);
  const double a = 1.0 / (1.0 - rho_);
  const double b = rho_ / (1.0 - rho_ + d * rho_);
  Tensor inv({dim_, dim_});
  for (std::size_t i = 0; i < dim_; ++i) {
    for (std::size_t j = 0; j < dim_; ++j) inv(i, j) = a * ((i == j ? 1.0 : 0.0) - b);
  }
  return inv;
}

Var MultivariateTTarget::log_joint(Tape& tape, const Var& theta) const {
  check_theta(theta, dim_, "mvt");
  const double d = static_cast<double>(dim_);
  const double a = 1.0 / (1.0 - rho_);
  const double b = rho_ / (1.0 - rho_ + d * rho_);
  const Var quad = (sum_rows(square(theta)) - square(sum_rows(theta)) * b) * a;
  const double normaliser = log_gamma(0.5 * (dof_ + d)) - log_gamma(0.5 * dof_) -
                            0.5 * d * std::log(dof_ * std::numbers::pi) - 0.5 * log_det_scale();
  return log1p(quad * (1.0 / dof_)) * (-0.5 * (dof_ + d)) + tape.constant(normaliser);
}

Tensor MultivariateTTarget::sample_posterior(std::size_t n, Rng& rng) const {
  Matrix sigma = Matrix::Constant(dim_, dim_, rho_);
  sigma.diagonal().setOnes();
  const Matrix l = sigma.llt().matrixL();
  Tensor out({n, dim_});
  Vector eps(dim_);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim_; ++j) eps(j) = rng.normal();
    const double g = rng.gamma(0.5 * dof_) / (0.5 * dof_);
    const Vector x = l * eps / std::sqrt(g);
    for (std::size_t j = 0; j < dim_; ++j) out(i, j) = x(j);
  }
  return out;
}

// ---- Gaussian mixture ------------------------------------------------------------------------

GaussianMixtureTarget::GaussianMixtureTarget(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw ContractViolation("mixture: dim must be positive");
  const double c = 6.0 / std::sqrt(static_cast<double>(dim));
  centres_ = {c, -c, 0.0};
}

Var GaussianMixtureTarget::log_joint(Tape& tape, const Var& theta) const {
  check_theta(theta, dim_, "mixture");
  std::vector<Var> comps;
  for (double c : centres_) comps.push_back(sum_rows(square(theta - c)) * -0.5);
  const double constant = -std::log(static_cast<double>(centres_.size())) -
                          0.5 * static_cast<double>(dim_) * kLog2Pi;
  return logsumexp_rows(stack_cols(comps)) + tape.constant(constant);
}

Tensor GaussianMixtureTarget::sample_posterior(std::size_t n, Rng& rng) const {
  Tensor out({n, dim_});
  for (std::size_t i = 0; i < n; ++i) {
    const double c = centres_[rng.index(centres_.size())];
    for (std::size_t j = 0; j < dim_; ++j) out(i, j) = c + rng.normal();
  }
  return out;
}

// ---- synthetic data ---------------------------------------------------------------------------

SyntheticDataset generate_synthetic(DataKind kind, std::size_t features, std::size_t n,
                                    std::uint64_t seed) {
  if (features == 0) throw ContractViolation("generate_synthetic: need at least one feature");
  Rng rng(seed);
  const bool logistic = kind == DataKind::Logistic;
  const Matrix l = correlation_matrix(features, logistic ? 0.1 : 0.5).llt().matrixL();
  std::vector<double> beta(features, 0.0);
  const std::vector<std::pair<std::size_t, double>> nonzero = {{0, 3.0}, {1, 1.5}, {4, 2.0}};
  for (const auto& [j, v] : nonzero) {
    if (j < features) beta[j] = v;
  }
  SyntheticDataset data;
  data.kind = kind;
  data.seed = seed;
  data.x = Tensor({n, features});
  data.y.resize(n);
  Vector eps(features);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < features; ++j) eps(j) = rng.normal();
    const Vector x = l * eps;
    double eta = 0.0;
    for (std::size_t j = 0; j < features; ++j) {
      data.x(i, j) = x(j);
      eta += x(j) * beta[j];
    }
    if (logistic) {
      data.y[i] = rng.uniform() < sigmoid(eta + 1.0) ? 1.0 : 0.0;
    } else {
      data.y[i] = eta + 3.0 * rng.normal();
    }
  }
  return data;
}

void write_dataset_csv(const SyntheticDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset to " + path.string());
  out.precision(17);
  const std::size_t d = data.features();
  for (std::size_t j = 0; j < d; ++j) out << "x_" << (j + 1) << ',';
  out << "y\n";
  for (std::size_t i = 0; i < data.n(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out << data.x(i, j) << ',';
    out << data.y[i] << '\n';
  }
}

SyntheticDataset read_dataset_csv(const std::filesystem::path& path, DataKind kind) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read dataset " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty dataset");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split(line);
  if (header.size() < 2 || header.back() != "y") {
    throw std::runtime_error(path.string() + ": header must be x_1..x_d,y");
  }
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "x_" + std::to_string(j + 1)) {
      throw std::runtime_error(path.string() + ": unexpected header column " + header[j]);
    }
  }
  std::vector<double> xs;
  SyntheticDataset data;
  data.kind = kind;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != d + 1) {
      throw std::runtime_error(path.string() + ": row " + std::to_string(row) + " has " +
                               std::to_string(cells.size()) + " columns, expected " +
                               std::to_string(d + 1));
    }
    for (std::size_t j = 0; j < d; ++j) xs.push_back(std::stod(cells[j]));
    data.y.push_back(std::stod(cells[d]));
  }
  data.x = Tensor({data.y.size(), d}, std::move(xs));
  return data;
}

// ---- conjugate linear regression ------------------------------------------------------------------

double conjlr_true_log_marginal(const Tensor& x, std::span<const double> y) {
  const std::size_t n = y.size();
  const Matrix xm = to_eigen(x);
  const Vector yv = Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(n));
  const Matrix u = xm.transpose() * xm + Matrix::Identity(xm.cols(), xm.cols());
  const Eigen::LLT<Matrix> llt(u);
  const Vector xty = xm.transpose() * yv;
  // yᵀΣ⁻¹y = yᵀy − yᵀX U⁻¹ Xᵀy;  |Σ| = |U|.
  const double quad = yv.squaredNorm() - xty.dot(llt.solve(xty));
  const Matrix lower = llt.matrixL();
  const double log_det_u = 2.0 * lower.diagonal().array().log().sum();
  const double nn = static_cast<double>(n);
  return log_gamma(0.5 * (1.0 + nn)) - log_gamma(0.5) - 0.5 * nn * kLogPi - 0.5 * log_det_u -
         0.5 * (1.0 + nn) * std::log1p(quad);
}

ConjugateLinearRegression::ConjugateLinearRegression(SyntheticDataset data)
    : data_(std::move(data)), features_(data_.features()) {
  if (features_ == 0) throw ContractViolation("conjlr: dataset has no features");
  xt_ = transpose(data_.x);
  y_ = Tensor::vector(data_.y);
  log_marginal_ = conjlr_true_log_marginal(data_.x, data_.y);

  const Matrix xm = to_eigen(data_.x);
  const Vector yv = Eigen::Map<const Vector>(data_.y.data(), static_cast<Eigen::Index>(data_.n()));
  const Matrix u = xm.transpose() * xm + Matrix::Identity(features_, features_);
  const Eigen::LLT<Matrix> llt(u);
  const Vector xty = xm.transpose() * yv;
  const Vector mu = llt.solve(xty);
  alpha_post_ = 0.5 * (1.0 + static_cast<double>(data_.n()));
  beta_post_ = 0.5 * (yv.squaredNorm() + 1.0 - xty.dot(mu));
  mu_post_.assign(mu.data(), mu.data() + mu.size());
  const Matrix lower = llt.matrixL();
  chol_u_.resize(features_ * features_);
  for (std::size_t i = 0; i < features_; ++i) {
    for (std::size_t j = 0; j < features_; ++j) chol_u_[i * features_ + j] = lower(i, j);
  }
}

Var ConjugateLinearRegression::log_joint(Tape& tape, const Var& theta) const {
  check_theta(theta, dim(), "conjlr");
  const double d = static_cast<double>(features_);
  const double n = static_cast<double>(data_.n());
  const auto beta_cols = range(0, features_);
  const Var beta = select_cols(theta, beta_cols);
  const Var raw = column(theta, features_);
  const Var variance = softplus(raw);
  const Var log_variance = log(variance);
  const Var inv_variance = pow(variance, -1.0);

  // Inv-Gamma(½, ½)
  const Var prior_variance =
      log_variance * -1.5 - inv_variance * 0.5 + (0.5 * std::log(0.5) - log_gamma(0.5));
  const Var prior_beta =
      (log_variance + kLog2Pi) * (-0.5 * d) - mul(sum_rows(square(beta)), inv_variance) * 0.5;
  const Var residual = add_row(matmul(beta, tape.constant(xt_)), tape.constant(y_) * -1.0);
  const Var likelihood =
      (log_variance + kLog2Pi) * (-0.5 * n) - mul(sum_rows(square(residual)), inv_variance) * 0.5;
  return prior_variance + prior_beta + likelihood + softplus_log_jacobian(raw);
}

Tensor ConjugateLinearRegression::sample_posterior(std::size_t n, Rng& rng) const {
  const std::size_t d = features_;
  Matrix lower(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) lower(i, j) = chol_u_[i * d + j];
  }
  Tensor out({n, d + 1});
  Vector eps(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double variance = beta_post_ / rng.gamma(alpha_post_);
    for (std::size_t j = 0; j < d; ++j) eps(j) = rng.normal();
    // β | σ², y ~ N(μ_post, σ² U⁻¹); U = L Lᵀ so L⁻ᵀ ε has covariance U⁻¹.
    const Vector z = lower.transpose().triangularView<Eigen::Upper>().solve(eps);
    for (std::size_t j = 0; j < d; ++j) out(i, j) = mu_post_[j] + std::sqrt(variance) * z(j);
    out(i, d) = softplus_inverse(variance);
  }
  return out;
}

// ---- horseshoe logistic regression ----------------------------------------------------------------

HorseshoeLogistic::HorseshoeLogistic(SyntheticDataset data)
    : data_(std::move(data)), features_(data_.features()) {
  if (features_ == 0) throw ContractViolation("horseshoe: dataset has no features");
  xt_ = transpose(data_.x);
  sign_ = Tensor({data_.n()});
  for (std::size_t i = 0; i < data_.n(); ++i) {
    const double y = data_.y[i];
    if (y != 0.0 && y != 1.0) throw ContractViolation("horseshoe: responses must be 0 or 1");
    sign_[i] = 2.0 * y - 1.0;
  }
}

Var HorseshoeLogistic::log_joint(Tape& tape, const Var& theta) const {
  check_theta(theta, dim(), "horseshoe");
  const std::size_t d = features_;
  const double dd = static_cast<double>(d);
  const auto beta_cols = range(0, d);
  const auto lambda_cols = range(d, 2 * d);
  const Var beta = select_cols(theta, beta_cols);
  const Var lambda_raw = select_cols(theta, lambda_cols);
  const Var tau_raw = column(theta, 2 * d);
  const Var mu_raw = column(theta, 2 * d + 1);
  const Var lambda = softplus(lambda_raw);
  const Var tau = softplus(tau_raw);
  const Var mu = softplus(mu_raw);

  const Var jacobian = sum_rows(softplus_log_jacobian(lambda_raw)) +
                       softplus_log_jacobian(tau_raw) + softplus_log_jacobian(mu_raw);
  const Var scales = half_cauchy_log_pdf(tau, 1.0) + sum_rows(half_cauchy_log_pdf(lambda, 1.0)) +
                     half_cauchy_log_pdf(mu, 10.0);
  // Σ_j log N(β_j; 0, τ²λ_j²)
  const Var prior_beta = (log(tau) * dd + 0.5 * dd * kLog2Pi) * -1.0 - sum_rows(log(lambda)) -
                         mul(sum_rows(square(beta / lambda)), pow(tau, -2.0)) * 0.5;
  Var total = jacobian + scales + prior_beta;
  if (data_.n() > 0) {
    const Var logit = add_col(matmul(beta, tape.constant(xt_)), mu);
    const Var signed_logit = mul_row(logit, tape.constant(sign_));
    total = total - sum_rows(softplus(-signed_logit));
  }
  return total;
}

}  // namespace flowvi
