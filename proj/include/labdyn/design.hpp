#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "labdyn/types.hpp"

namespace labdyn {

/// Ordered coefficient names for one regression block.
struct Layout {
  std::vector<std::string> names;

  Eigen::Index size() const noexcept { return static_cast<Eigen::Index>(names.size()); }
  /// Position of a named coefficient; throws InvalidInput when absent.
  Eigen::Index index_of(const std::string& name) const;
};

/// Fixed design layouts, parameterized by the number of latent classes.
/// With (4, 3) classes they reproduce the published coefficient inventories.
class Designs {
 public:
  Designs(int num_mobility_classes, int num_income_classes);

  int num_mobility_classes() const noexcept { return km_; }
  int num_income_classes() const noexcept { return ky_; }

  const Layout& kappa_m() const noexcept { return kappa_m_; }
  const Layout& chi0() const noexcept { return chi0_; }
  const Layout& chi() const noexcept { return chi_; }
  const Layout& kappa_y() const noexcept { return kappa_y_; }
  const Layout& mu() const noexcept { return mu_; }
  const Layout& sigma() const noexcept { return sigma_; }
  const Layout& xi() const noexcept { return xi_; }

  // Row builders. Each writes exactly layout.size() entries.
  void kappa_m_row(const FixedCovariates& zf, Eigen::Ref<Eigen::VectorXd> out) const;
  void chi0_row(const FixedCovariates& zf, int km, Eigen::Ref<Eigen::VectorXd> out) const;
  void chi_row(EmploymentState prev, const TimeVaryingCovariates& zv_prev, const FixedCovariates& zf, int km,
               Eigen::Ref<Eigen::VectorXd> out) const;
  void kappa_y_row(const FixedCovariates& zf, int km, Eigen::Ref<Eigen::VectorXd> out) const;
  void mu_row(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int ky,
              Eigen::Ref<Eigen::VectorXd> out) const;
  void sigma_row(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int km, int ky,
                 Eigen::Ref<Eigen::VectorXd> out) const;
  void xi_row(EmploymentState cur, EmploymentState prev, const TimeVaryingCovariates& zv,
              const TimeVaryingCovariates& zv_prev, int km, int ky, Eigen::Ref<Eigen::VectorXd> out) const;

  Eigen::VectorXd kappa_m_row(const FixedCovariates& zf) const;
  Eigen::VectorXd chi0_row(const FixedCovariates& zf, int km) const;
  Eigen::VectorXd chi_row(EmploymentState prev, const TimeVaryingCovariates& zv_prev, const FixedCovariates& zf,
                          int km) const;
  Eigen::VectorXd kappa_y_row(const FixedCovariates& zf, int km) const;
  Eigen::VectorXd mu_row(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int ky) const;
  Eigen::VectorXd sigma_row(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int km,
                            int ky) const;
  Eigen::VectorXd xi_row(EmploymentState cur, EmploymentState prev, const TimeVaryingCovariates& zv,
                         const TimeVaryingCovariates& zv_prev, int km, int ky) const;

  void check_mobility_class(int km) const;
  void check_income_class(int ky) const;

 private:
  int km_;
  int ky_;
  Layout kappa_m_, chi0_, chi_, kappa_y_, mu_, sigma_, xi_;
};

}  // namespace labdyn
