#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "labdyn/panel_io.hpp"
#include "labdyn/params.hpp"
#include "labdyn/types.hpp"

namespace labdyn {

enum class LifetimeScenario { JobForLifePublic, JobForLifePrivate, MobilityPublicStart, MobilityPrivateStart, Unconditional };

std::string to_string(LifetimeScenario s);

/// V_R = (1 - beta^h) / (1 - beta) * rr * exp(y).
double retirement_value(double last_log_wage, double beta, double rr, int horizon_years = 22);

struct LifetimeValue {
  double value = 0.0;
  double flow = 0.0;        // discounted in-activity part
  double retirement = 0.0;  // discounted V_R
  bool never_employed = true;
};

/// sum_s beta^s exp(y_s) over employed years (non-employment contributes 0)
/// plus beta^n V_R anchored on the last employed wage and its sector's rate.
LifetimeValue lifetime_value(const std::vector<YearRecord>& trajectory, double beta, const ReplacementRate& rr,
                             int horizon_years = 22);

struct LifetimeResult {
  std::string id;
  LifetimeScenario scenario = LifetimeScenario::Unconditional;
  double value = 0.0;
  double log_value = 0.0;  // NaN when never employed
  bool never_employed = false;
  bool female = false;
  Education educ = Education::Low;
  EmploymentState observed_start = EmploymentState::NonEmployed;
  int km = 0;
  int ky = 0;
  int periods = 0;
};

/// Where each individual's (km, ky) comes from: the class priors given zf, or
/// the joint posterior given the observed history.
enum class ClassSource { Prior, Posterior };

std::string to_string(ClassSource s);
ClassSource class_source_from_string(const std::string& s);

struct LifetimeOptions {
  double beta = 0.95;
  ReplacementRate rr{};
  int horizon_years = 22;
  int retirement_age = 60;
  EntryAgeRule ages{};
  RhoMode rho_mode = RhoMode::CorrelationConsistent;
  std::uint64_t seed = 1;
  ClassSource classes = ClassSource::Prior;

  void validate() const;
};

/// Years from the first observation until the retirement age (at least 1).
int periods_to_retirement(const FixedCovariates& zf, const LifetimeOptions& options);

/// Full-time job in the given sector (private or public full-time) every year until retirement.
std::vector<LifetimeResult> job_for_life_values(const Panel& panel, EmploymentState sector, const MobilityParams& theta_m,
                                                const IncomeParams& theta_y, const LifetimeOptions& options);

enum class StartCondition { ObservedPublic, ObservedPrivate, Unconditional };

/// Free transitions from the observed first state and wage.
std::vector<LifetimeResult> mobility_values(const Panel& panel, StartCondition start, const MobilityParams& theta_m,
                                            const IncomeParams& theta_y, const LifetimeOptions& options);

/// Linear interpolation between order statistics at h = (n - 1) p, p in [0, 1].
double quantile_sorted(const std::vector<double>& sorted, double p);

inline constexpr std::size_t kMinCurveGroup = 100;

struct PremiumCurve {
  std::vector<int> percentiles;
  std::vector<double> log_diff;  // quantile of A minus quantile of B
  std::size_t n_a = 0;
  std::size_t n_b = 0;
  bool wide_uncertainty = false;  // a group has fewer than kMinCurveGroup values
};

std::vector<int> default_percentiles();

PremiumCurve premium_curve(std::vector<double> log_a, std::vector<double> log_b,
                           const std::vector<int>& percentiles = default_percentiles());

/// Log values of employed-at-least-once results passing the filter.
std::vector<double> log_values(const std::vector<LifetimeResult>& results,
                               const std::function<bool(const LifetimeResult&)>& keep = {});

/// Grid percentiles where positivity differs from the previous grid point.
std::vector<int> sign_changes(const PremiumCurve& curve);

struct NamedCurve {
  std::string name;
  std::string group_a;
  std::string group_b;
  PremiumCurve curve;
};

struct Counterfactuals {
  std::vector<LifetimeResult> jfl_public;
  std::vector<LifetimeResult> jfl_private;
  std::vector<LifetimeResult> mobility;  // every individual from the observed start
  std::vector<NamedCurve> curves;
};

/// Job-for-life and with-mobility values for every individual (classes held
/// fixed across scenarios) and the premium and loss curves: public premium
/// with and without selection (aggregate, by gender, by education) and the
/// loss of free mobility for public and private starters.
Counterfactuals run_counterfactuals(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y,
                                    const LifetimeOptions& options);

/// "0.4" for a common rate, "0.75/0.71" (public/private) otherwise.
std::string rr_label(const ReplacementRate& rr);

/// Columns: percentile, log_diff, group_a, group_b, scenario (curve name), RR, beta, seed, then group sizes.
std::string curves_to_csv(const std::vector<NamedCurve>& curves, const LifetimeOptions& options);
std::string results_to_csv(const std::vector<LifetimeResult>& results);

}  // namespace labdyn
