#pragma once

#include <span>

#include <Eigen/Dense>

#include "labdyn/math.hpp"
#include "labdyn/params.hpp"
#include "labdyn/types.hpp"

namespace labdyn {

// Class-membership and state probabilities. All are softmax outputs with the
// base outcome (index 0) at score zero.

Eigen::VectorXd class_prior_mobility(const FixedCovariates& zf, const MobilityParams& params);
Eigen::VectorXd log_class_prior_mobility(const FixedCovariates& zf, const MobilityParams& params);

Eigen::VectorXd class_prior_income(const FixedCovariates& zf, int km, const IncomeParams& params);
Eigen::VectorXd log_class_prior_income(const FixedCovariates& zf, int km, const IncomeParams& params);

Eigen::VectorXd initial_state_probs(const FixedCovariates& zf, int km, const MobilityParams& params);
Eigen::VectorXd transition_probs(EmploymentState prev, const TimeVaryingCovariates& zv_prev,
                                 const FixedCovariates& zf, int km, const MobilityParams& params);

// Income moments. Each throws InvalidInput for the non-employed state.

/// Mean of the log wage.
double income_mean(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int ky,
                   const IncomeParams& params);
/// Standard deviation of the log wage, sqrt(exp(score)).
double income_sd(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int km, int ky,
                 const IncomeParams& params);
/// Correlation of consecutive normalized log wages (both years employed).
Correlation pair_correlation(EmploymentState cur, EmploymentState prev, const TimeVaryingCovariates& zv,
                             const TimeVaryingCovariates& zv_prev, int km, int ky, const IncomeParams& params);

/// One employed year, normalized.
struct IncomeTerm {
  double ytilde = 0.0;
  double log_sd = 0.0;
  bool continues_run = false;  // previous calendar year also employed
  Correlation tau;             // meaningful only when continues_run
};

/// Log density of a sequence of employed years under the run-restart rule:
/// a run's first year contributes log phi(y~) - log sd, each continuation the
/// conditional normal of y~_t given y~_{t-1} minus log sd_t.
double income_loglik(std::span<const IncomeTerm> terms);

double income_loglik(const IndividualHistory& h, int km, int ky, const IncomeParams& params);
double mobility_loglik(const IndividualHistory& h, int km, const MobilityParams& params);

/// log L_m + log Pr(km | zf) + log L_y + log Pr(ky | km, zf).
double complete_loglik(const IndividualHistory& h, int km, int ky, const MobilityParams& theta_m,
                       const IncomeParams& theta_y);

/// True when year index t continues an employed run (t and t-1 consecutive and employed).
bool continues_employed_run(const IndividualHistory& h, std::size_t t);

/// Rejects non-finite covariates.
void check_covariates(const FixedCovariates& zf);

}  // namespace labdyn
