#include <Eigen/Dense>
#include <boost/math/distributions/cauchy.hpp>
#include <boost/math/distributions/inverse_gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/sinh_sinh.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "doctest.h"
#include "flowvi/targets.hpp"
#include "support.hpp"

using namespace flowvi;
namespace quad = boost::math::quadrature;
namespace bm = boost::math;

namespace {

constexpr double kPi = std::numbers::pi;

double integrate_line(const std::function<double(double)>& f, double tol = 1e-10) {
  quad::sinh_sinh<double> q;
  return q.integrate(f, tol);
}

double integrate_positive(const std::function<double(double)>& f, double tol = 1e-10) {
  quad::exp_sinh<double> q;
  return q.integrate(f, 0.0, std::numeric_limits<double>::infinity(), tol);
}

double integrate_plane(const TargetModel& t) {
  return integrate_line(
      [&](double a) {
        return integrate_line([&](double b) {
          const std::vector<double> x = {a, b};
          const double v = std::exp(t.log_joint_at(x));
          return std::isfinite(v) ? v : 0.0;  // quadrature nodes reach ±1e300
        }, 1e-9);
      },
      1e-8);
}

SyntheticDataset toy_regression() {
  SyntheticDataset d;
  d.x = Tensor({3, 1}, std::vector<double>{0.5, -1.2, 2.0});
  d.y = {0.8, -1.5, 2.3};
  d.kind = DataKind::Regression;
  return d;
}

std::vector<double> random_point(std::size_t n, std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
  return m;
}

}  // namespace

TEST_CASE("funnel hand values") {
  FunnelTarget f(2);
  const std::vector<double> zero = {0.0, 0.0};
  CHECK(f.log_joint_at(zero) ==
        doctest::Approx(-0.5 * std::log(2 * kPi * 9) - 0.5 * std::log(2 * kPi)).epsilon(1e-14));
  const std::vector<double> p = {2.0, 0.0};
  CHECK(f.log_joint_at(p) ==
        doctest::Approx(-4.0 / 18.0 - 0.5 * std::log(18 * kPi) - 0.5 * (std::log(2 * kPi) + 2.0)).epsilon(1e-14));
  CHECK_THROWS_AS(FunnelTarget(1), ContractViolation);
}

TEST_CASE("funnel matches Boost normal pdfs at random points") {
  FunnelTarget f(6);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto x = random_point(6, s, 2.0);
    double expected = std::log(bm::pdf(bm::normal(0.0, 3.0), x[0]));
    for (std::size_t j = 1; j < 6; ++j) expected += std::log(bm::pdf(bm::normal(0.0, std::exp(x[0] / 2)), x[j]));
    CHECK(f.log_joint_at(x) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("normalised targets integrate to one in low dimension") {
  CHECK(std::abs(integrate_plane(FunnelTarget(2)) - 1.0) < 1e-3);
  for (double nu : {1.0, 4.0}) {
    MultivariateTTarget m1(1, nu);
    CHECK(std::abs(integrate_line([&](double a) {
            const std::vector<double> x = {a};
            return std::exp(m1.log_joint_at(x));
          }) - 1.0) < 1e-3);
    CHECK(std::abs(integrate_plane(MultivariateTTarget(2, nu)) - 1.0) < 1e-3);
  }
  GaussianMixtureTarget g1(1);
  CHECK(std::abs(integrate_line([&](double a) {
          const std::vector<double> x = {a};
          return std::exp(g1.log_joint_at(x));
        }) - 1.0) < 1e-4);
  CHECK(std::abs(integrate_plane(GaussianMixtureTarget(2)) - 1.0) < 1e-3);
}

TEST_CASE("multivariate t: closed-form inverse and dense density") {
  const std::size_t d = 7;
  MultivariateTTarget m(d, 3.0, 0.8);
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Constant(d, d, 0.8);
  sigma.diagonal().setOnes();
  const Eigen::MatrixXd inv = sigma.inverse();
  CHECK((to_eigen(m.scale_inverse()) - inv).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(m.log_det_scale() - std::log(sigma.determinant())) < 1e-10);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto x = random_point(d, 40 + s, 3.0);
    const Eigen::Map<const Eigen::VectorXd> v(x.data(), d);
    const double q = v.dot(inv * v);
    const double expected = std::lgamma((3.0 + d) / 2) - std::lgamma(1.5) - d / 2.0 * std::log(3.0 * kPi) -
                            0.5 * std::log(sigma.determinant()) - (3.0 + d) / 2 * std::log1p(q / 3.0);
    CHECK(std::abs(m.log_joint_at(x) - expected) < 1e-10);
  }
  MultivariateTTarget one(1, 5.0);
  const std::vector<double> zero = {0.0};
  CHECK(one.log_joint_at(zero) ==
        doctest::Approx(std::lgamma(3.0) - std::lgamma(2.5) - 0.5 * std::log(5 * kPi)).epsilon(1e-13));
  CHECK(m.dof() == 3.0);
  CHECK(MultivariateTTarget(4).dof() == 1.0);
  CHECK_THROWS_AS(MultivariateTTarget(3, 0.0), ContractViolation);
}

TEST_CASE("Gaussian mixture values and symmetry") {
  GaussianMixtureTarget g(1);
  const std::vector<double> zero = {0.0};
  CHECK(std::abs(g.log_joint_at(zero) - std::log(bm::pdf(bm::normal(), 0.0) / 3.0)) < 1e-7);
  for (std::size_t d : {1u, 3u, 10u}) {
    GaussianMixtureTarget m(d);
    const double c = 6.0 / std::sqrt(static_cast<double>(d));
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto x = random_point(d, s, 2.0);
      double p = 0.0;
      for (double centre : {c, -c, 0.0}) {
        double term = 1.0;
        for (double v : x) term *= bm::pdf(bm::normal(centre, 1.0), v);
        p += term / 3.0;
      }
      CHECK(m.log_joint_at(x) == doctest::Approx(std::log(p)).epsilon(1e-12));
      std::vector<double> neg = x;
      for (double& v : neg) v = -v;
      CHECK(std::abs(m.log_joint_at(neg) - m.log_joint_at(x)) < 1e-14);
    }
  }
}

TEST_CASE("conjugate regression closed form matches 2-D quadrature") {
  const auto data = toy_regression();
  const double closed = conjlr_true_log_marginal(data.x, data.y);
  const bm::inverse_gamma_distribution<double> prior(0.5, 0.5);
  const double evidence = integrate_positive(
      [&](double s2) {
        if (s2 <= 0.0 || !std::isfinite(s2)) return 0.0;
        const double sd = std::sqrt(s2);
        const double inner = integrate_line(
            [&](double b) {
              if (!std::isfinite(b) || std::abs(b) > 1e100) return 0.0;
              double lik = bm::pdf(bm::normal(0.0, sd), b);
              for (std::size_t i = 0; i < 3; ++i) lik *= bm::pdf(bm::normal(data.x(i, 0) * b, sd), data.y[i]);
              return lik;
            },
            1e-11);
        return inner * bm::pdf(prior, s2);
      },
      1e-10);
  CHECK(std::abs(closed - std::log(evidence)) < 1e-4);
  ConjugateLinearRegression model(data);
  REQUIRE(model.true_log_marginal().has_value());
  CHECK(*model.true_log_marginal() == closed);
}

TEST_CASE("conjugate regression log joint against Boost pdfs") {
  const auto data = toy_regression();
  ConjugateLinearRegression model(data);
  REQUIRE(model.dim() == 2);
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto x = random_point(2, s, 1.5);
    const double s2 = std::log1p(std::exp(x[1]));
    const double sd = std::sqrt(s2);
    double expected = std::log(bm::pdf(bm::inverse_gamma_distribution<double>(0.5, 0.5), s2)) +
                      std::log(bm::pdf(bm::normal(0.0, sd), x[0])) - std::log1p(std::exp(-x[1]));
    for (std::size_t i = 0; i < 3; ++i) expected += std::log(bm::pdf(bm::normal(data.x(i, 0) * x[0], sd), data.y[i]));
    CHECK(model.log_joint_at(x) == doctest::Approx(expected).epsilon(1e-11));
  }
}

TEST_CASE("conjugate posterior sampler moments") {
  const auto data = generate_synthetic(DataKind::Regression, 4, 50, 3);
  ConjugateLinearRegression model(data);
  Rng rng(17);
  const std::size_t n = 100000;
  const Tensor draws = model.sample_posterior(n, rng);
  REQUIRE(draws.rows() == n);
  REQUIRE(draws.cols() == 5);
  for (std::size_t j = 0; j < 4; ++j) {
    double m = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += draws(i, j);
    m /= double(n);
    for (std::size_t i = 0; i < n; ++i) ss += (draws(i, j) - m) * (draws(i, j) - m);
    const double se = std::sqrt(ss / double(n - 1) / double(n));
    CHECK(std::abs(m - model.posterior_mean()[j]) < 3.0 * se);
  }
  double s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) s2 += std::log1p(std::exp(draws(i, 4)));
  const double expected = model.posterior_scale() / (model.posterior_shape() - 1.0);
  CHECK(std::abs(s2 / double(n) - expected) < 0.02 * expected);
}

TEST_CASE("horseshoe prior-only value at the origin") {
  SyntheticDataset empty;
  empty.x = Tensor({0, 1});
  empty.kind = DataKind::Logistic;
  HorseshoeLogistic h(empty);
  REQUIRE(h.dim() == 4);
  const double l2 = std::log(2.0);
  const auto hc = [](double x, double s) { return std::log(2.0 * bm::pdf(bm::cauchy(0.0, s), x)); };
  const double expected = std::log(bm::pdf(bm::normal(0.0, l2 * l2), 0.0)) + hc(l2, 1.0) + hc(l2, 1.0) +
                          hc(l2, 10.0) + 3.0 * std::log(0.5);
  const std::vector<double> zero(4, 0.0);
  CHECK(h.log_joint_at(zero) == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("horseshoe likelihood is Bernoulli-logit") {
  SyntheticDataset empty;
  empty.x = Tensor({0, 2});
  HorseshoeLogistic prior(empty);
  SyntheticDataset d;
  d.x = Tensor({3, 2}, std::vector<double>{1.0, -2.0, 0.5, 0.3, -1.5, 2.5});
  d.y = {1.0, 0.0, 1.0};
  d.kind = DataKind::Logistic;
  HorseshoeLogistic h(d);
  // β = 0 and μ → 0 gives logit ≈ 0: log ½ per observation
  std::vector<double> theta = {0.0, 0.0, 0.3, -0.2, 0.1, -40.0};
  CHECK(h.log_joint_at(theta) - prior.log_joint_at(theta) == doctest::Approx(3 * std::log(0.5)).epsilon(1e-12));
  theta = {0.7, -1.1, 0.3, -0.2, 0.1, 0.4};
  const double mu = std::log1p(std::exp(0.4));
  double lik = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double logit = d.x(i, 0) * 0.7 + d.x(i, 1) * -1.1 + mu;
    const double p = 1.0 / (1.0 + std::exp(-logit));
    lik += d.y[i] == 1.0 ? std::log(p) : std::log1p(-p);
  }
  CHECK(h.log_joint_at(theta) - prior.log_joint_at(theta) == doctest::Approx(lik).epsilon(1e-12));
  d.y[1] = 0.5;
  CHECK_THROWS_AS(HorseshoeLogistic{d}, ContractViolation);
}

TEST_CASE("log joints are finite and differentiable") {
  const auto logistic = generate_synthetic(DataKind::Logistic, 3, 20, 5);
  const auto regression = generate_synthetic(DataKind::Regression, 3, 20, 5);
  std::vector<std::unique_ptr<TargetModel>> targets;
  targets.push_back(std::make_unique<StandardNormalTarget>(3));
  targets.push_back(std::make_unique<FunnelTarget>(4));
  targets.push_back(std::make_unique<MultivariateTTarget>(4));
  targets.push_back(std::make_unique<GaussianMixtureTarget>(4));
  targets.push_back(std::make_unique<ConjugateLinearRegression>(regression));
  targets.push_back(std::make_unique<HorseshoeLogistic>(logistic));
  for (const auto& t : targets) {
    CAPTURE(t->name());
    const std::size_t d = t->dim();
    const auto x = random_point(2 * d, 99, 1.0);
    CHECK(fvtest::gradient_check({2, d}, x, [&](Tape& tape, const Var& v) { return t->log_joint(tape, v); }, 1e-6) <
          1e-6);
    for (double scale : {10.0, 100.0}) {
      CHECK(std::isfinite(t->log_joint_at(random_point(d, 7, scale))));
    }
    Tape tape;
    CHECK_THROWS_AS(t->log_joint(tape, tape.constant(Tensor({2, d + 1}))), ContractViolation);
  }
}

TEST_CASE("exact samplers reproduce target moments") {
  Rng rng(8);
  const Tensor f = FunnelTarget(3).sample_posterior(100000, rng);
  double m = 0.0, v = 0.0;
  for (std::size_t i = 0; i < f.rows(); ++i) {
    m += f(i, 0);
    v += f(i, 0) * f(i, 0);
  }
  CHECK(std::abs(m / 1e5) < 0.05);
  CHECK(std::abs(v / 1e5 - 9.0) < 0.15);

  const Tensor g = GaussianMixtureTarget(4).sample_posterior(90000, rng);
  std::size_t positive = 0;
  for (std::size_t i = 0; i < g.rows(); ++i) positive += g(i, 0) + g(i, 1) + g(i, 2) + g(i, 3) > 6.0 ? 1 : 0;
  CHECK(std::abs(double(positive) / 90000.0 - 1.0 / 3.0) < 0.01);

  // correlation of the t target via its Gaussian scale mixture: use ν = 30
  const Tensor t = MultivariateTTarget(3, 30.0).sample_posterior(100000, rng);
  double c01 = 0.0, c00 = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    c01 += t(i, 0) * t(i, 1);
    c00 += t(i, 0) * t(i, 0);
  }
  CHECK(std::abs(c01 / c00 - 0.8) < 0.01);
  CHECK(std::abs(c00 / 1e5 - 30.0 / 28.0) < 0.03);
}

TEST_CASE("synthetic generators") {
  const auto a = generate_synthetic(DataKind::Logistic, 5, 100000, 42);
  const auto b = generate_synthetic(DataKind::Logistic, 5, 100000, 42);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  CHECK_FALSE(generate_synthetic(DataKind::Logistic, 5, 50, 43).y ==
              std::vector<double>(a.y.begin(), a.y.begin() + 50));
  double ones = 0.0;
  for (double y : a.y) ones += y;
  CHECK(ones / 1e5 > 0.5);

  for (const auto& [kind, base] : {std::pair{DataKind::Logistic, 0.1}, std::pair{DataKind::Regression, 0.5}}) {
    // 4·10⁵ draws put the 0.01 tolerance at ~4.5 standard errors on the diagonal
    const auto data = generate_synthetic(kind, 5, 400000, 7);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double c = 0.0;
        for (std::size_t r = 0; r < data.n(); ++r) c += data.x(r, i) * data.x(r, j);
        CAPTURE(base);
        CHECK(std::abs(c / double(data.n()) - std::pow(base, std::abs(double(i) - double(j)))) < 0.01);
      }
    }
  }

  // regression residual y − xᵀβ has variance 9
  const auto r = generate_synthetic(DataKind::Regression, 10, 100000, 9);
  const std::vector<double> beta = {3, 1.5, 0, 0, 2, 0, 0, 0, 0, 0};
  double ss = 0.0;
  for (std::size_t i = 0; i < r.n(); ++i) {
    double e = r.y[i];
    for (std::size_t j = 0; j < 10; ++j) e -= beta[j] * r.x(i, j);
    ss += e * e;
  }
  CHECK(std::abs(ss / 1e5 - 9.0) < 0.15);
}

TEST_CASE("dataset CSV round trip and validation") {
  const auto dir = std::filesystem::temp_directory_path() / "flowvi_targets_csv";
  std::filesystem::create_directories(dir);
  const auto data = generate_synthetic(DataKind::Regression, 3, 25, 1);
  write_dataset_csv(data, dir / "d.csv");
  const auto back = read_dataset_csv(dir / "d.csv", DataKind::Regression);
  CHECK(back.x == data.x);
  CHECK(back.y == data.y);
  {
    std::ifstream in(dir / "d.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "x_1,x_2,x_3,y");
  }
  {
    std::ofstream out(dir / "bad.csv");
    out << "x_1,x_2,y\n1,2,3\n4,5\n";
  }
  try {
    (void)read_dataset_csv(dir / "bad.csv", DataKind::Regression);
    FAIL("short row must be rejected");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }
  {
    std::ofstream out(dir / "header.csv");
    out << "a,b\n1,2\n";
  }
  CHECK_THROWS(read_dataset_csv(dir / "header.csv", DataKind::Regression));
  CHECK_THROWS(read_dataset_csv(dir / "missing.csv", DataKind::Regression));
  std::filesystem::remove_all(dir);
}
