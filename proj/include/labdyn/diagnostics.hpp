#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "labdyn/panel_io.hpp"
#include "labdyn/params.hpp"
#include "labdyn/types.hpp"

namespace labdyn {

using PersonFilter = std::function<bool(const IndividualHistory&)>;

/// Row-stochastic 5x5 matrix with its cell counts and the state occupancy row.
struct TransitionMatrix {
  Eigen::MatrixXd prob = Eigen::MatrixXd::Zero(kNumStates, kNumStates);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(kNumStates, kNumStates);  // expected counts when implied
  Eigen::RowVectorXd occupancy = Eigen::RowVectorXd::Zero(kNumStates);
  std::array<bool, kNumStates> empty_row{true, true, true, true, true};  // zero-count rows stay at 0
  bool empty = true;
  double transitions = 0.0;
  double observations = 0.0;
};

/// Builds probabilities and flags from counts and per-state observation totals.
TransitionMatrix matrix_from_counts(const Eigen::MatrixXd& counts, const Eigen::RowVectorXd& state_totals);

/// Empirical frequencies of consecutive-year pairs among individuals passing the filter.
TransitionMatrix transition_matrix(const Panel& panel, const PersonFilter& keep = {});

/// Model-implied frequencies for the same individuals and years: expected
/// transition counts from the class-mixed state distribution, propagated
/// exactly over (state, employed years) from the initial-state logit.
TransitionMatrix implied_transition_matrix(const Panel& panel, const MobilityParams& theta_m,
                                           const PersonFilter& keep = {});

/// Sup-norm over the 5x5 probabilities. Throws InvalidInput on shape mismatch.
double matrix_distance(const TransitionMatrix& a, const TransitionMatrix& b);

inline constexpr double kDefaultBinWidth = 0.05;

enum class HistogramGroup { All, State, Sector, Gender, IncomeClass };
std::string to_string(HistogramGroup g);
HistogramGroup histogram_group_from_string(const std::string& s);

/// Density on bins [anchor + j w, anchor + (j+1) w), j = first_bin + index.
struct Histogram {
  std::string group;
  double width = kDefaultBinWidth;
  double anchor = 0.0;
  long first_bin = 0;
  std::vector<double> density;
  std::size_t count = 0;
  bool empty = true;

  double mass() const;
};

/// One histogram per group level (fixed level sets for state, sector and gender).
std::vector<Histogram> wage_histogram(const Panel& panel, double width = kDefaultBinWidth,
                                      HistogramGroup by = HistogramGroup::All);

/// Integral of |f - g|. Throws InvalidInput on different widths or anchors.
double histogram_l1(const Histogram& a, const Histogram& b);

enum class ClassKind { Mobility, Income };

struct CompositionRow {
  int cls = 0;
  std::size_t count = 0;
  double share = 0.0;
  double female = 0.0;
  std::array<double, 3> educ{};      // low, medium, high
  std::array<double, 3> age_band{};  // <=30, 31-45, >45 at first observation
};

struct CompositionTable {
  ClassKind kind = ClassKind::Mobility;
  std::vector<CompositionRow> rows;
};

/// Requires attached classes (InvalidInput otherwise).
CompositionTable composition_table(const Panel& panel, ClassKind kind, const EntryAgeRule& ages = {});

/// Index of the age band: 0 (<= 30), 1 (31-45), 2 (> 45).
int age_band(double age);

/// Mixture moments of the log wage by state; index 0 (non-employed) unused.
struct StateWageMoments {
  std::array<double, kNumStates> mean{};
  std::array<double, kNumStates> sd{};
  std::array<double, kNumStates> weight{};
};

/// Model moments at each employed observation with classes weighted by the
/// joint posterior under (theta_m, theta_y).
StateWageMoments posterior_wage_moments(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y);

/// Same moments at the attached (true) classes.
StateWageMoments class_wage_moments(const Panel& panel, const IncomeParams& theta_y);

/// Permutation perm[estimated] = true class maximizing sum_i w(i, k) [true_i == perm[k]].
std::vector<int> align_classes(const Eigen::MatrixXd& weights, const std::vector<int>& true_classes, int num_true);

// CSV emitters.
std::string to_csv(const TransitionMatrix& m, const std::string& label);
std::string to_csv(const std::vector<Histogram>& hs);
std::string to_csv(const CompositionTable& t);

/// Both panels' matrices (aggregate, men, women), their distances, histogram
/// L1 distances by group and both composition tables when classes are attached.
std::string compare_report(const Panel& a, const Panel& b, double bin_width = kDefaultBinWidth);

}  // namespace labdyn
