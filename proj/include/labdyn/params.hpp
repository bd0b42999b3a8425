#pragma once

#include <Eigen/Dense>

#include "labdyn/design.hpp"

namespace labdyn {

/// Shared, immutable layouts for a class configuration.
const Designs& designs_for(int num_mobility_classes, int num_income_classes);

/// Mobility block: class-membership logits, initial-state logits and
/// transition logits. Row 0 of every matrix is the base outcome and stays zero.
struct MobilityParams {
  Eigen::MatrixXd kappa_m;  // classes x kappa_m layout
  Eigen::MatrixXd chi0;     // states x chi0 layout
  Eigen::MatrixXd chi;      // states x chi layout

  static MobilityParams zeros(int num_classes);

  int num_classes() const noexcept { return static_cast<int>(kappa_m.rows()); }
  const Designs& designs() const { return designs_for(num_classes(), 1); }

  /// Concatenation of all coefficients (including the zero base rows).
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::Ref<const Eigen::VectorXd>& v);
  bool all_finite() const;
  /// Throws InvalidInput on shape mismatch, non-finite entries or a non-zero base row.
  void validate() const;
};

/// Income block: income-class logits and the mean, log-variance and
/// correlation-link regressions.
struct IncomeParams {
  int num_mobility_classes = 1;
  Eigen::MatrixXd kappa_y;  // income classes x kappa_y layout
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma;
  Eigen::VectorXd xi;

  static IncomeParams zeros(int num_mobility_classes, int num_income_classes);

  int num_classes() const noexcept { return static_cast<int>(kappa_y.rows()); }
  const Designs& designs() const { return designs_for(num_mobility_classes, num_classes()); }

  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::Ref<const Eigen::VectorXd>& v);
  bool all_finite() const;
  void validate() const;
};

/// Euclidean distance between two coefficient vectors of equal length.
double coefficient_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace labdyn
