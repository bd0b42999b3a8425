#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "labdyn/kernels.hpp"
#include "labdyn/params.hpp"
#include "labdyn/types.hpp"

namespace labdyn {

/// N x Km posterior class probabilities.
struct MobilityPosterior {
  Eigen::MatrixXd prob;
};

/// N x (Km * Ky) posterior probabilities; column km * Ky + ky.
struct JointPosterior {
  Eigen::MatrixXd prob;
  int num_mobility = 1;
  int num_income = 1;

  double at(Eigen::Index i, int km, int ky) const { return prob(i, km * num_income + ky); }
  /// N x Km marginal over income classes.
  Eigen::MatrixXd mobility_marginal() const;
  /// N x Ky marginal over mobility classes.
  Eigen::MatrixXd income_marginal() const;
};

struct TraceRecord {
  std::string phase;
  int iteration = 0;
  double loglik = 0.0;   // observed-data log-likelihood at the parameters entering the iteration
  double distance = 0.0; // coefficient distance produced by the iteration
};

/// Observed-data log-likelihood per phase; also the value the E-step normalizes.
double observed_loglik_mobility(const Panel& panel, const MobilityParams& theta_m);
double observed_loglik_joint(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y);

MobilityPosterior e_step_mobility(const Panel& panel, const MobilityParams& theta_m, double* loglik = nullptr);
JointPosterior e_step_joint(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y,
                            double* loglik = nullptr);

struct MStepReport {
  std::vector<std::string> notes;  // kernel fits that did not converge cleanly
};

/// Weighted multinomial logits on Km stacked copies of the panel. With a warm
/// start every fit ascends from it.
MobilityParams m_step_mobility(const Panel& panel, const Eigen::MatrixXd& class_weights,
                               const MobilityParams* warm_start = nullptr, MStepReport* report = nullptr);
inline MobilityParams m_step_mobility(const Panel& panel, const MobilityPosterior& posterior,
                                      const MobilityParams* warm_start = nullptr, MStepReport* report = nullptr) {
  return m_step_mobility(panel, posterior.prob, warm_start, report);
}

struct IncomeMStepOptions {
  /// Likelihood-ascent refinement after the regression steps.
  bool refine = true;
  int refine_rounds = 2;
};

struct IncomeMStepReport {
  std::vector<std::string> notes;
  double q_current = 0.0;    // expected income log-likelihood at the incoming parameters
  double q_candidate = 0.0;  // ... at the regression-step candidate
  double q_final = 0.0;
  bool candidate_used = false;
  /// Posterior-weighted moments of y~ under the returned parameters (employed rows).
  double ytilde_mean = 0.0;
  double ytilde_var = 0.0;
};

/// Regression steps: 12 weighted copies; mu by weighted OLS; sigma by the
/// log squared residual regression; y~ renormalization and the f-transform
/// regression for xi; kappa_y by weighted mlogit. When refine is set, the
/// better of candidate and incoming parameters is then improved by block
/// ascent on the expected income log-likelihood.
IncomeParams m_step_income(const Panel& panel, const JointPosterior& posterior, const IncomeParams& current,
                           const IncomeMStepOptions& options = {}, IncomeMStepReport* report = nullptr);

/// Expected complete-data income log-likelihood (without the class prior).
double expected_income_loglik(const Panel& panel, const JointPosterior& posterior, const IncomeParams& theta_y);

/// Derivatives of expected_income_loglik with respect to the sigma or xi
/// coefficients (for checking and for the ascent steps).
void income_block_derivatives(const Panel& panel, const JointPosterior& posterior, const IncomeParams& theta_y,
                              bool sigma_block, Eigen::VectorXd* gradient, Eigen::MatrixXd* hessian);

struct EmOptions {
  double tol = 1e-3;
  int max_iterations = 500;
  int restarts = 1;
  std::uint64_t seed = 1;
  /// Throws std::logic_error when the observed log-likelihood drops by more than this.
  double monotone_tol = 1e-8;
  bool check_monotone = true;
  IncomeMStepOptions income{};
  int checkpoint_every = 0;
  std::function<void(const std::string& phase, int iteration, const MobilityParams&, const IncomeParams*)>
      on_checkpoint;
  std::function<void(const TraceRecord&)> on_iteration;
};

struct EmResult {
  MobilityParams mobility;
  IncomeParams income;
  std::vector<TraceRecord> trace;
  bool converged = false;
  int iterations = 0;
  double loglik = 0.0;
  double max_drop = 0.0;  // largest log-likelihood decrease seen (0 when monotone)
  std::vector<std::string> notes;
};

/// Coefficients uniform on (-0.1, 0.1), base rows zero.
MobilityParams random_mobility_params(int num_classes, std::uint64_t seed);
IncomeParams random_income_params(int num_mobility_classes, int num_income_classes, std::uint64_t seed);

EmResult run_em_mobility(const Panel& panel, const MobilityParams& init, const EmOptions& options = {});
EmResult run_em_income(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& init,
                       const EmOptions& options = {});
EmResult run_em_joint(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y,
                      const EmOptions& options = {});

struct EstimateResult {
  EmResult mobility;
  EmResult income;
  EmResult joint;
  bool converged() const { return mobility.converged && income.converged && joint.converged; }
};

/// Phases 1 to 3 from seeded random starts.
EstimateResult estimate(const Panel& panel, const ModelConfig& config, const EmOptions& options = {});

}  // namespace labdyn
