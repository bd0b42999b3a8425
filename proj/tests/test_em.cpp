#include <doctest.h>

#include <cmath>

#include "labdyn/em.hpp"
#include "labdyn/kernels.hpp"
#include "labdyn/model.hpp"
#include "labdyn/parallel.hpp"
#include "labdyn/params_io.hpp"
#include "labdyn/simulate.hpp"
#include "test_support.hpp"

using namespace labdyn;

namespace {
const ParameterFile& fixture() {
  static const ParameterFile pf = load_params(testing::fixture_params());
  return pf;
}

const Panel& small_panel() {
  static const Panel p = generate_panel({}, fixture().mobility, fixture().income, 1500, 8, 5);
  return p;
}

double oracle_joint(const Panel& panel, const MobilityParams& m, const IncomeParams& y) {
  double total = 0.0;
  for (const auto& h : panel) {
    Eigen::VectorXd terms(m.num_classes() * y.num_classes());
    for (int km = 0; km < m.num_classes(); ++km)
      for (int ky = 0; ky < y.num_classes(); ++ky) terms[km * y.num_classes() + ky] = complete_loglik(h, km, ky, m, y);
    total += log_sum_exp(terms);
  }
  return total;
}

double oracle_mobility(const Panel& panel, const MobilityParams& m) {
  double total = 0.0;
  for (const auto& h : panel) {
    const Eigen::VectorXd lp = log_class_prior_mobility(h.zf, m);
    Eigen::VectorXd terms(m.num_classes());
    for (int km = 0; km < m.num_classes(); ++km) terms[km] = lp[km] + mobility_loglik(h, km, m);
    total += log_sum_exp(terms);
  }
  return total;
}
}  // namespace

TEST_CASE("observed log-likelihoods match the class-sum oracle") {
  const auto& p = small_panel();
  const auto& pf = fixture();
  CHECK(observed_loglik_mobility(p, pf.mobility) == doctest::Approx(oracle_mobility(p, pf.mobility)).epsilon(1e-11));
  CHECK(observed_loglik_joint(p, pf.mobility, pf.income) ==
        doctest::Approx(oracle_joint(p, pf.mobility, pf.income)).epsilon(1e-11));
}

TEST_CASE("posterior rows sum to one and marginals agree") {
  const auto& p = small_panel();
  const auto& pf = fixture();
  double ll = 0.0;
  const auto mp = e_step_mobility(p, pf.mobility, &ll);
  CHECK(ll == doctest::Approx(observed_loglik_mobility(p, pf.mobility)).epsilon(1e-12));
  CHECK((mp.prob.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  const auto jp = e_step_joint(p, pf.mobility, pf.income);
  REQUIRE(jp.prob.cols() == 12);
  CHECK((jp.prob.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK((jp.mobility_marginal().rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(jp.income_marginal().cols() == 3);
  CHECK(jp.at(7, 2, 1) == jp.prob(7, 7));
}

TEST_CASE("e-step and m-step do not depend on the thread count") {
  const auto& p = small_panel();
  const auto& pf = fixture();
  set_num_threads(1);
  double l1 = 0;
  const auto a = e_step_joint(p, pf.mobility, pf.income, &l1);
  const auto ma = m_step_mobility(p, a.mobility_marginal(), &pf.mobility);
  set_num_threads(8);
  double l8 = 0;
  const auto b = e_step_joint(p, pf.mobility, pf.income, &l8);
  const auto mb = m_step_mobility(p, b.mobility_marginal(), &pf.mobility);
  set_num_threads(1);
  CHECK(std::abs(l1 - l8) < 1e-10 * std::abs(l1));
  CHECK((a.prob - b.prob).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((ma.flatten() - mb.flatten()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("sigma and xi derivatives match finite differences") {
  const auto& p = small_panel();
  const auto& pf = fixture();
  const auto post = e_step_joint(p, pf.mobility, pf.income);
  for (const bool sigma : {true, false}) {
    Eigen::VectorXd g;
    Eigen::MatrixXd hess;
    income_block_derivatives(p, post, pf.income, sigma, &g, &hess);
    const Eigen::VectorXd& base = sigma ? pf.income.sigma : pf.income.xi;
    REQUIRE(g.size() == base.size());
    for (Eigen::Index j = 0; j < base.size(); j += 3) {
      const double h = 1e-5;
      IncomeParams up = pf.income, dn = pf.income;
      (sigma ? up.sigma : up.xi)[j] += h;
      (sigma ? dn.sigma : dn.xi)[j] -= h;
      const double fd = (expected_income_loglik(p, post, up) - expected_income_loglik(p, post, dn)) / (2 * h);
      CHECK(std::abs(fd - g[j]) <= 1e-6 * std::max(1.0, std::abs(g[j])));
    }
    CHECK((hess - hess.transpose()).cwiseAbs().maxCoeff() < 1e-8 * std::max(1.0, hess.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("income m-step never lowers the expected log-likelihood") {
  const auto& p = small_panel();
  const auto& pf = fixture();
  const auto start = random_income_params(4, 3, 3);
  const auto post = e_step_joint(p, pf.mobility, start);
  IncomeMStepReport rep;
  const auto next = m_step_income(p, post, start, {}, &rep);
  CHECK(rep.q_final >= rep.q_current - 1e-8);
  CHECK(expected_income_loglik(p, post, next) == doctest::Approx(rep.q_final).epsilon(1e-10));
}

TEST_CASE("normalized residuals are standard near a fixed point") {
  const auto& p = small_panel();
  const auto& pf = fixture();
  const auto post = e_step_joint(p, pf.mobility, pf.income);
  IncomeMStepReport rep;
  m_step_income(p, post, pf.income, {}, &rep);
  CHECK(std::abs(rep.ytilde_mean) < 0.02);
  CHECK(std::abs(rep.ytilde_var - 1.0) < 0.05);
}

TEST_CASE("random starts are seeded and keep base rows at zero") {
  const auto a = random_mobility_params(4, 9), b = random_mobility_params(4, 9), c = random_mobility_params(4, 10);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.flatten() != c.flatten());
  CHECK(a.kappa_m.row(0).isZero());
  CHECK(a.chi.row(0).isZero());
  CHECK(a.kappa_m.bottomRows(3).cwiseAbs().maxCoeff() < 0.1);
  const auto y = random_income_params(4, 3, 9);
  CHECK(y.kappa_y.row(0).isZero());
}

TEST_CASE("EM is monotone in all phases from a random start") {
  const auto& p = small_panel();
  EmOptions o;
  o.max_iterations = 8;
  const auto m = run_em_mobility(p, random_mobility_params(4, 1), o);
  const auto y = run_em_income(p, m.mobility, random_income_params(4, 3, 2), o);
  const auto j = run_em_joint(p, m.mobility, y.income, o);
  for (const auto* r : {&m, &y, &j}) {
    CHECK(r->max_drop <= 1e-8);
    for (std::size_t t = 1; t < r->trace.size(); ++t) CHECK(r->trace[t].loglik >= r->trace[t - 1].loglik - 1e-8);
  }
  CHECK(m.trace.front().phase == "mobility");
  CHECK(j.trace.front().phase == "joint");
}

TEST_CASE("one class in each block converges at once") {
  const auto& p = small_panel();
  EmOptions o;
  o.tol = 1e-6;
  o.max_iterations = 20;
  const auto m = run_em_mobility(p, random_mobility_params(1, 1), o);
  CHECK(m.converged);
  CHECK(m.iterations <= 3);
  const auto post = e_step_mobility(p, m.mobility);
  CHECK((post.prob.array() == 1.0).all());
}

TEST_CASE("iteration cap reports non-convergence") {
  const auto& p = small_panel();
  EmOptions o;
  o.tol = 1e-12;
  o.max_iterations = 2;
  const auto m = run_em_mobility(p, random_mobility_params(4, 1), o);
  CHECK_FALSE(m.converged);
  CHECK(m.iterations == 2);
}
