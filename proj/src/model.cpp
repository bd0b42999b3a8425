#include "labdyn/model.hpp"

#include <cmath>

namespace labdyn {

namespace {

void require_employed(EmploymentState s) {
  if (!is_employed(s)) throw InvalidInput("wage moments are undefined in the non-employment state");
}

void check_mobility_shape(const MobilityParams& p) {
  if (p.kappa_m.rows() < 1 || p.chi0.rows() != kNumStates || p.chi.rows() != kNumStates)
    throw InvalidInput("malformed mobility parameters");
}

}  // namespace

void check_covariates(const FixedCovariates& zf) {
  if (!std::isfinite(zf.first_xp) || zf.first_xp < 0.0) throw InvalidInput("first_xp must be finite and >= 0");
  const int e = static_cast<int>(zf.educ);
  if (e < 0 || e > 2) throw InvalidInput("education code out of range");
}

Eigen::VectorXd log_class_prior_mobility(const FixedCovariates& zf, const MobilityParams& params) {
  check_covariates(zf);
  check_mobility_shape(params);
  const auto& d = params.designs();
  const Eigen::VectorXd scores = params.kappa_m * d.kappa_m_row(zf);
  return log_softmax(scores);
}

Eigen::VectorXd class_prior_mobility(const FixedCovariates& zf, const MobilityParams& params) {
  check_covariates(zf);
  check_mobility_shape(params);
  const auto& d = params.designs();
  return softmax(params.kappa_m * d.kappa_m_row(zf));
}

Eigen::VectorXd log_class_prior_income(const FixedCovariates& zf, int km, const IncomeParams& params) {
  check_covariates(zf);
  const auto& d = params.designs();
  d.check_mobility_class(km);
  return log_softmax(params.kappa_y * d.kappa_y_row(zf, km));
}

Eigen::VectorXd class_prior_income(const FixedCovariates& zf, int km, const IncomeParams& params) {
  check_covariates(zf);
  const auto& d = params.designs();
  d.check_mobility_class(km);
  return softmax(params.kappa_y * d.kappa_y_row(zf, km));
}

Eigen::VectorXd initial_state_probs(const FixedCovariates& zf, int km, const MobilityParams& params) {
  check_covariates(zf);
  check_mobility_shape(params);
  const auto& d = params.designs();
  d.check_mobility_class(km);
  return softmax(params.chi0 * d.chi0_row(zf, km));
}

Eigen::VectorXd transition_probs(EmploymentState prev, const TimeVaryingCovariates& zv_prev,
                                 const FixedCovariates& zf, int km, const MobilityParams& params) {
  check_covariates(zf);
  check_mobility_shape(params);
  if (!std::isfinite(zv_prev.xp) || zv_prev.xp < 0.0) throw InvalidInput("xp must be finite and >= 0");
  const auto& d = params.designs();
  d.check_mobility_class(km);
  return softmax(params.chi * d.chi_row(prev, zv_prev, zf, km));
}

double income_mean(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int ky,
                   const IncomeParams& params) {
  require_employed(s);
  const auto& d = params.designs();
  d.check_income_class(ky);
  return d.mu_row(s, zv, zf, ky).dot(params.mu);
}

double income_sd(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int km, int ky,
                 const IncomeParams& params) {
  require_employed(s);
  const auto& d = params.designs();
  d.check_mobility_class(km);
  d.check_income_class(ky);
  return std::sqrt(std::exp(d.sigma_row(s, zv, zf, km, ky).dot(params.sigma)));
}

Correlation pair_correlation(EmploymentState cur, EmploymentState prev, const TimeVaryingCovariates& zv,
                             const TimeVaryingCovariates& zv_prev, int km, int ky, const IncomeParams& params) {
  require_employed(cur);
  require_employed(prev);
  const auto& d = params.designs();
  d.check_mobility_class(km);
  d.check_income_class(ky);
  return Correlation::from_score(d.xi_row(cur, prev, zv, zv_prev, km, ky).dot(params.xi));
}

double income_loglik(std::span<const IncomeTerm> terms) {
  double ll = 0.0;
  double prev_ytilde = 0.0;
  for (const auto& t : terms) {
    if (t.continues_run)
      ll += conditional_normal_logpdf(t.ytilde, prev_ytilde, t.tau.clamped(kCorrelationClamp));
    else
      ll += normal_logpdf(t.ytilde);
    ll -= t.log_sd;
    prev_ytilde = t.ytilde;
  }
  return ll;
}

bool continues_employed_run(const IndividualHistory& h, std::size_t t) {
  if (t == 0 || t >= h.years.size()) return false;
  const auto& cur = h.years[t];
  const auto& prev = h.years[t - 1];
  return is_employed(cur.state) && is_employed(prev.state) && cur.year == prev.year + 1;
}

double income_loglik(const IndividualHistory& h, int km, int ky, const IncomeParams& params) {
  const auto& d = params.designs();
  d.check_mobility_class(km);
  d.check_income_class(ky);
  std::vector<IncomeTerm> terms;
  terms.reserve(h.years.size());
  for (std::size_t t = 0; t < h.years.size(); ++t) {
    const auto& yr = h.years[t];
    if (!is_employed(yr.state)) continue;
    if (!yr.log_wage) throw InvalidInput("employed year without a wage for person " + h.id);
    IncomeTerm term;
    const double m = d.mu_row(yr.state, yr.zv, h.zf, ky).dot(params.mu);
    const double log_var = d.sigma_row(yr.state, yr.zv, h.zf, km, ky).dot(params.sigma);
    term.log_sd = 0.5 * log_var;
    term.ytilde = (*yr.log_wage - m) * std::exp(-term.log_sd);
    term.continues_run = continues_employed_run(h, t);
    if (term.continues_run) {
      const auto& pv = h.years[t - 1];
      term.tau = Correlation::from_score(d.xi_row(yr.state, pv.state, yr.zv, pv.zv, km, ky).dot(params.xi));
    }
    terms.push_back(term);
  }
  return income_loglik(terms);
}

double mobility_loglik(const IndividualHistory& h, int km, const MobilityParams& params) {
  check_mobility_shape(params);
  const auto& d = params.designs();
  d.check_mobility_class(km);
  if (h.years.empty()) return 0.0;
  double ll = log_softmax(params.chi0 * d.chi0_row(h.zf, km))[code(h.years.front().state)];
  Eigen::VectorXd row(d.chi().size());
  for (std::size_t t = 1; t < h.years.size(); ++t) {
    const auto& prev = h.years[t - 1];
    d.chi_row(prev.state, prev.zv, h.zf, km, row);
    ll += log_softmax(params.chi * row)[code(h.years[t].state)];
  }
  return ll;
}

double complete_loglik(const IndividualHistory& h, int km, int ky, const MobilityParams& theta_m,
                       const IncomeParams& theta_y) {
  return mobility_loglik(h, km, theta_m) + log_class_prior_mobility(h.zf, theta_m)[km] +
         income_loglik(h, km, ky, theta_y) + log_class_prior_income(h.zf, km, theta_y)[ky];
}

}  // namespace labdyn
