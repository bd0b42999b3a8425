#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "labdyn/kernels.hpp"
#include "labdyn/math.hpp"

using namespace labdyn;

namespace {

WeightedDataset random_logit_data(std::mt19937_64& g, int rows, int features, int classes) {
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u(0.1, 2.0);
  std::uniform_int_distribution<int> cls(0, classes - 1);
  WeightedDataset d(features);
  Eigen::VectorXd x(features);
  for (int r = 0; r < rows; ++r) {
    x[0] = 1.0;
    for (int f = 1; f < features; ++f) x[f] = n01(g);
    d.add(x, cls(g), u(g));
  }
  return d;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

}  // namespace

TEST_CASE("mlogit gradient and Hessian match central differences") {
  std::mt19937_64 g(11);
  for (int inst = 0; inst < 10; ++inst) {
    const int F = 2 + inst * 3 % 9, J = 2 + inst % 4;
    const auto d = random_logit_data(g, 200, F, J);
    std::normal_distribution<double> n01;
    Eigen::MatrixXd beta = Eigen::MatrixXd::Zero(J, F);
    for (int j = 1; j < J; ++j)
      for (int f = 0; f < F; ++f) beta(j, f) = 0.5 * n01(g);
    Eigen::VectorXd grad;
    Eigen::MatrixXd hess;
    mlogit_objective(d, J, 0, beta, &grad, &hess);
    const double h = 1e-5;
    Eigen::Index p = 0;
    for (int j = 1; j < J; ++j)
      for (int f = 0; f < F; ++f, ++p) {
        Eigen::MatrixXd bp = beta, bm = beta;
        bp(j, f) += h;
        bm(j, f) -= h;
        Eigen::VectorXd gp, gm;
        const double fd = (mlogit_objective(d, J, 0, bp, &gp) - mlogit_objective(d, J, 0, bm, &gm)) / (2 * h);
        CHECK(rel_err(grad[p], fd) < 1e-6);
        const Eigen::VectorXd hcol = (gp - gm) / (2 * h);
        CHECK((hcol - hess.col(p)).cwiseAbs().maxCoeff() < 1e-6);
      }
  }
}

TEST_CASE("OLS gradient matches central differences") {
  std::mt19937_64 g(12);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int inst = 0; inst < 10; ++inst) {
    const int F = 1 + 3 * inst;
    WeightedDataset d(F);
    Eigen::VectorXd x(F);
    for (int r = 0; r < 300; ++r) {
      for (int f = 0; f < F; ++f) x[f] = n01(g);
      d.add(x, n01(g), u(g));
    }
    Eigen::VectorXd b(F);
    for (int f = 0; f < F; ++f) b[f] = n01(g);
    Eigen::VectorXd grad;
    ols_objective(d, b, &grad);
    for (int f = 0; f < F; ++f) {
      Eigen::VectorXd bp = b, bm = b;
      bp[f] += 1e-5;
      bm[f] -= 1e-5;
      const double fd = (ols_objective(d, bp) - ols_objective(d, bm)) / 2e-5;
      CHECK(rel_err(grad[f], fd) < 1e-6);
    }
  }
}

TEST_CASE("bivariate normal log density matches the quadratic form") {
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) {
      const double a = -2.5 + 0.5 * i, b = -2.0 + 0.45 * j, tau = -0.95 + 0.19 * ((i + j) % 11);
      Eigen::Matrix2d S;
      S << 1.0, tau, tau, 1.0;
      const Eigen::Vector2d v(a, b);
      const double direct =
          -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(S.determinant()) - 0.5 * v.dot(S.inverse() * v);
      CHECK(std::abs(bivariate_normal_logpdf(a, b, tau) - direct) < 1e-12);
    }
}

TEST_CASE("log_sum_exp and softmax are stable") {
  Eigen::Vector3d x(1000.0, 1000.0, -1e300);
  CHECK(log_sum_exp(x) == doctest::Approx(1000.0 + std::log(2.0)));
  const Eigen::VectorXd p = softmax(x);
  CHECK(p.sum() == doctest::Approx(1.0));
  CHECK(p[2] == 0.0);
}

TEST_CASE("fisher link and correlation round trip") {
  CHECK(fisher_link(0.0) == 0.0);
  CHECK(fisher_link(0.5) == doctest::Approx(std::log(3.0)));
  for (double s : {-30.0, -3.0, 0.0, 0.7, 12.0, 40.0}) {
    const Correlation c = Correlation::from_score(s);
    CHECK(fisher_link(c) == doctest::Approx(s).epsilon(1e-12));
  }
  CHECK(Correlation::from_score(40.0).gap() > 0.0);
  CHECK_THROWS_AS(fisher_link(1.0), InvalidInput);
}

TEST_CASE("rho from sigma and tau solves its quadratic") {
  for (double s2 : {0.05, 0.5, 2.0})
    for (double tau : {-0.9, -0.2, 0.0, 0.3, 0.95}) {
      const double r = rho_from_sigma_tau(s2, tau);
      CHECK(std::abs(tau * r * r + s2 * r - tau) < 1e-14);
      CHECK(std::abs(r) <= 1.0);
    }
}

TEST_CASE("mlogit intercept equals the log odds of the sample shares") {
  WeightedDataset d(1);
  Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
  for (int i = 0; i < 75; ++i) d.add(one, 0, 1.0);
  for (int i = 0; i < 25; ++i) d.add(one, 1, 1.0);
  const FitReport r = fit_weighted_mlogit(d, 2);
  CHECK(r.converged);
  CHECK(r.gradient_norm <= 1e-8);
  CHECK(r.coefficients(1, 0) == doctest::Approx(std::log(0.25 / 0.75)).epsilon(1e-10));
  CHECK(r.coefficients(0, 0) == 0.0);
}

TEST_CASE("mlogit is invariant to weight scaling and row order") {
  std::mt19937_64 g(5);
  const auto d = random_logit_data(g, 500, 4, 3);
  WeightedDataset scaled(4), shuffled(4);
  WeightedBlock blk;
  std::vector<std::tuple<Eigen::VectorXd, int, double>> rows;
  for (std::size_t b = 0; b < d.num_blocks(); ++b) {
    d.fill_block(b, blk);
    for (Eigen::Index r = 0; r < blk.rows(); ++r) rows.emplace_back(blk.features.row(r).transpose(), blk.outcome[r], blk.weight[r]);
  }
  for (auto& [x, y, w] : rows) scaled.add(x, y, 7.5 * w);
  std::shuffle(rows.begin(), rows.end(), g);
  for (auto& [x, y, w] : rows) shuffled.add(x, y, w);
  const auto a = fit_weighted_mlogit(d, 3), b = fit_weighted_mlogit(scaled, 3), c = fit_weighted_mlogit(shuffled, 3);
  CHECK((a.coefficients - b.coefficients).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((a.coefficients - c.coefficients).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("separated mlogit is clamped and flagged") {
  WeightedDataset d(2);
  for (int i = 0; i < 50; ++i) {
    d.add(Eigen::Vector2d(1.0, 0.0), i % 2, 1.0);
    d.add(Eigen::Vector2d(1.0, 1.0), 0, 1.0);  // x = 1 never picks outcome 1
  }
  const FitReport r = fit_weighted_mlogit(d, 2);
  CHECK_FALSE(r.converged);
  CHECK(r.status == FitStatus::Diverged);
  CHECK(r.coefficients(1, 1) == doctest::Approx(-30.0));
  CHECK(r.coefficients(1, 0) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("mlogit recovers a known 4-class logit") {
  std::mt19937_64 g(99);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int F = 3, J = 4, N = 100000;
  Eigen::MatrixXd truth(J, F);
  truth << 0, 0, 0, 0.3, -0.5, 0.8, -0.4, 0.6, 0.1, 0.2, 0.2, -0.7;
  WeightedDataset d(F);
  for (int i = 0; i < N; ++i) {
    const Eigen::Vector3d x(1.0, n01(g), n01(g));
    const Eigen::VectorXd p = softmax(Eigen::VectorXd(truth * x));
    double c = u(g);
    int y = 0;
    while (y < J - 1 && (c -= p[y]) > 0.0) ++y;
    d.add(x, y, 1.0);
  }
  const FitReport r = fit_weighted_mlogit(d, J);
  REQUIRE(r.converged);
  Eigen::MatrixXd hess;
  mlogit_objective(d, J, 0, r.coefficients, nullptr, &hess);
  const Eigen::MatrixXd cov = (-hess * N).inverse();  // objective is per unit weight
  Eigen::Index p = 0;
  for (int j = 1; j < J; ++j)
    for (int f = 0; f < F; ++f, ++p) CHECK(std::abs(r.coefficients(j, f) - truth(j, f)) < 3.0 * std::sqrt(cov(p, p)));
}

TEST_CASE("weighted OLS exact and weight-equivalent fits") {
  WeightedDataset d(1), dup(1);
  for (int i = 1; i <= 5; ++i) {
    d.add(Eigen::VectorXd::Constant(1, i), 2.0 * i, 1.0);
    dup.add(Eigen::VectorXd::Constant(1, i), 2.0 * i, 0.5);
    dup.add(Eigen::VectorXd::Constant(1, i), 2.0 * i, 0.5);
  }
  const auto a = fit_weighted_ols(d), b = fit_weighted_ols(dup);
  CHECK(a.coefficients(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(b.coefficients(0, 0) == doctest::Approx(a.coefficients(0, 0)).epsilon(1e-14));
  CHECK_FALSE(a.ridge_used);

  // two-point closed form
  WeightedDataset two(2);
  two.add(Eigen::Vector2d(1.0, 0.0), 1.0, 2.0);
  two.add(Eigen::Vector2d(1.0, 1.0), 4.0, 3.0);
  const auto t = fit_weighted_ols(two);
  CHECK(t.coefficients(0, 0) == doctest::Approx(1.0));
  CHECK(t.coefficients(1, 0) == doctest::Approx(3.0));
}

TEST_CASE("rank-deficient OLS falls back to ridge") {
  WeightedDataset d(2);
  for (int i = 0; i < 10; ++i) d.add(Eigen::Vector2d(1.0, 1.0), 3.0, 1.0);
  const auto r = fit_weighted_ols(d);
  CHECK(r.ridge_used);
  CHECK(r.coefficients.allFinite());
  CHECK(r.coefficients.sum() == doctest::Approx(3.0).epsilon(1e-6));
}

TEST_CASE("log-variance regression identities") {
  WeightedDataset d(1), d2(1);
  const double c = 0.37;
  for (int i = 0; i < 20; ++i) {
    d.add(Eigen::VectorXd::Ones(1), (i % 2 ? c : -c), 1.0);
    d2.add(Eigen::VectorXd::Ones(1), (i % 2 ? 2 * c : -2 * c), 1.0);
  }
  const auto a = fit_log_variance(d), b = fit_log_variance(d2);
  CHECK(a.coefficients(0, 0) == doctest::Approx(std::log(c * c)).epsilon(1e-12));
  CHECK(b.coefficients(0, 0) - a.coefficients(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  WeightedDataset z(1);
  z.add(Eigen::VectorXd::Ones(1), 0.0, 1.0);
  CHECK(fit_log_variance(z).coefficients(0, 0) == doctest::Approx(std::log(kResidualFloor)));
}

TEST_CASE("fisher-link regression identities and inverse round trip") {
  WeightedDataset zero(1), half(1);
  for (int i = 0; i < 10; ++i) {
    zero.add(Eigen::VectorXd::Ones(1), 0.0, 1.0);
    half.add(Eigen::VectorXd::Ones(1), 0.5, 1.0);
  }
  CHECK(std::abs(fit_fisher_link(zero).coefficients(0, 0)) < 1e-15);
  CHECK(fit_fisher_link(half).coefficients(0, 0) == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  // noiseless c = tanh(score / 2) on a linear score
  WeightedDataset d(2);
  for (int i = 0; i < 50; ++i) {
    const double x = -2.0 + 0.08 * i;
    d.add(Eigen::Vector2d(1.0, x), Correlation::from_score(0.3 + 1.1 * x).value(), 1.0);
  }
  const auto r = fit_fisher_link(d);
  for (int i = 0; i < 50; ++i) {
    const double x = -2.0 + 0.08 * i;
    const double c = Correlation::from_score(0.3 + 1.1 * x).value();
    const double back = Correlation::from_score(r.coefficients(0, 0) + r.coefficients(1, 0) * x).value();
    CHECK(std::abs(back - c) < 1e-8);
  }
}

TEST_CASE("compensated sum recovers cancellation") {
  CompensatedSum s;
  s += 1e16;
  s += 1.0;
  s += -1e16;
  CHECK(s.value() == 1.0);
}
