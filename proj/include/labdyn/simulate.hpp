#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "labdyn/panel_io.hpp"
#include "labdyn/params.hpp"
#include "labdyn/types.hpp"

namespace labdyn {

/// Hash of (seed, id, tag) used to seed a stream.
std::uint64_t stream_key(std::uint64_t seed, std::string_view id, std::string_view tag);

/// RNG stream keyed by (global seed, individual id, purpose tag). The same key
/// always yields the same sequence, whatever the scheduling.
class SeededStream {
 public:
  SeededStream(std::uint64_t seed, std::string_view id, std::string_view tag);

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double normal();
  /// Index drawn from a probability vector by inversion of one uniform.
  int categorical(const Eigen::Ref<const Eigen::VectorXd>& probs);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Separate state and wage streams so that every simulated year consumes
/// exactly one uniform and one normal, whatever happens in it.
struct SimulationStreams {
  SeededStream states;
  SeededStream wages;

  SimulationStreams(std::uint64_t seed, std::string_view id, std::string_view purpose);
};

struct ClassDraw {
  int km = 0;
  int ky = 0;
};

ClassDraw draw_classes(const FixedCovariates& zf, const MobilityParams& theta_m, const IncomeParams& theta_y,
                       SeededStream& stream);

struct SimulationSpec {
  int first_year = 2012;
  int horizon = 1;  // number of simulated years
  RhoMode rho_mode = RhoMode::CorrelationConsistent;
  /// Every year in this state (job for life); transitions are skipped.
  std::optional<EmploymentState> fixed_state;
  /// First-year state; drawn from the initial-state logit when absent.
  std::optional<EmploymentState> initial_state;
  /// Observed first-year log wage (only used when the first year is employed).
  std::optional<double> initial_log_wage;
  /// First-year normalized wage, used when no initial_log_wage applies.
  std::optional<double> initial_ytilde;
};

/// Rolls states and wages forward. Employed runs follow
/// y~_t = r_t y~_{t-1} + sqrt(1 - r_t^2) e_t with r_t = tau_t
/// (correlation_consistent) or rho(sigma_t^2, tau_t) (paper_formula), and
/// restart from a fresh draw after non-employment.
IndividualHistory simulate_individual(const std::string& id, const FixedCovariates& zf, int km, int ky,
                                      const MobilityParams& theta_m, const IncomeParams& theta_y,
                                      const SimulationSpec& spec, SimulationStreams& streams);

/// Covariate mixture of the synthetic population.
struct PopulationSpec {
  double female_share = 0.5;
  double educ_low = 0.69;
  double educ_med = 0.16;
  double educ_high = 0.15;
  double first_xp_min = 0.0;
  double first_xp_max = 3.0;
  int first_year = 2012;
  EntryAgeRule ages{};

  void validate() const;
};

/// key = value lines; '#' starts a comment; unknown keys are rejected.
PopulationSpec population_from_text(const std::string& text);
std::string to_text(const PopulationSpec& spec);

FixedCovariates draw_covariates(const PopulationSpec& spec, SeededStream& stream);

/// Identifier of the i-th generated individual.
std::string person_id(std::size_t i);

/// N individuals observed for T consecutive years; latent classes are attached.
Panel generate_panel(const PopulationSpec& population, const MobilityParams& theta_m, const IncomeParams& theta_y,
                     std::size_t n, int years, std::uint64_t seed, RhoMode rho_mode = RhoMode::CorrelationConsistent);

struct PredictOptions {
  /// Draw the first state and wage from the model instead of using the observed first spell.
  bool in_sample = false;
  /// Years simulated after the first; defaults to the individual's observed span.
  std::optional<int> horizon;
  RhoMode rho_mode = RhoMode::CorrelationConsistent;
};

struct PredictResult {
  Panel panel;
  ValidationReport report;
};

/// Keeps each individual's first observed spell and simulates forward with
/// classes drawn from the priors given zf.
PredictResult predict_panel(const Panel& observed, const MobilityParams& theta_m, const IncomeParams& theta_y,
                            std::uint64_t seed, const PredictOptions& options = {});

}  // namespace labdyn
