#pragma once

#include <functional>
#include <optional>
#include <string>

#include <Eigen/Dense>

namespace labdyn {

/// A slice of weighted rows. For categorical fits `outcome` is used, for
/// regressions `y`.
struct WeightedBlock {
  Eigen::MatrixXd features;
  Eigen::VectorXi outcome;
  Eigen::VectorXd y;
  Eigen::VectorXd weight;

  Eigen::Index rows() const noexcept { return features.rows(); }
  void resize(Eigen::Index rows, Eigen::Index cols);
};

/// Streams weighted design rows in a fixed block order. Implementations
/// generate rows on the fly so large stacked designs never materialize.
class DesignSource {
 public:
  virtual ~DesignSource() = default;
  virtual Eigen::Index num_features() const = 0;
  virtual std::size_t num_blocks() const = 0;
  virtual void fill_block(std::size_t b, WeightedBlock& out) const = 0;
};

/// Materialized rows.
class WeightedDataset : public DesignSource {
 public:
  WeightedDataset() = default;
  explicit WeightedDataset(Eigen::Index num_features) : cols_(num_features) {}

  void add(const Eigen::Ref<const Eigen::VectorXd>& features, int outcome, double weight);
  void add(const Eigen::Ref<const Eigen::VectorXd>& features, double y, double weight);

  Eigen::Index rows() const noexcept { return static_cast<Eigen::Index>(weight_.size()); }
  Eigen::Index num_features() const override { return cols_; }
  std::size_t num_blocks() const override;
  void fill_block(std::size_t b, WeightedBlock& out) const override;

  static constexpr Eigen::Index kBlockRows = 4096;

 private:
  void push(const Eigen::Ref<const Eigen::VectorXd>& features, int outcome, double y, double weight);

  Eigen::Index cols_ = 0;
  std::vector<double> features_;  // row-major
  std::vector<int> outcome_;
  std::vector<double> y_;
  std::vector<double> weight_;
};

/// Applies a transform to the real outcome of another source.
class MappedOutcomeSource : public DesignSource {
 public:
  MappedOutcomeSource(const DesignSource& inner, std::function<double(double)> map)
      : inner_(inner), map_(std::move(map)) {}
  Eigen::Index num_features() const override { return inner_.num_features(); }
  std::size_t num_blocks() const override { return inner_.num_blocks(); }
  void fill_block(std::size_t b, WeightedBlock& out) const override;

 private:
  const DesignSource& inner_;
  std::function<double(double)> map_;
};

/// Rows produced on demand by a callback; the callback sizes the block.
class GeneratedSource : public DesignSource {
 public:
  using Fill = std::function<void(std::size_t, WeightedBlock&)>;
  GeneratedSource(Eigen::Index num_features, std::size_t num_blocks, Fill fill)
      : cols_(num_features), blocks_(num_blocks), fill_(std::move(fill)) {}
  Eigen::Index num_features() const override { return cols_; }
  std::size_t num_blocks() const override { return blocks_; }
  void fill_block(std::size_t b, WeightedBlock& out) const override { fill_(b, out); }

 private:
  Eigen::Index cols_;
  std::size_t blocks_;
  Fill fill_;
};

/// Solves (A + lambda I) x = b for symmetric A expected to be positive
/// (semi)definite. lambda starts at 0 and, if A is not numerically positive
/// definite, escalates from ridge * trace(A)/n by factors of 10.
Eigen::VectorXd solve_regularized(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, double ridge, bool& ridge_used);

enum class FitStatus { Converged, IterationCap, Diverged, Stalled };

std::string to_string(FitStatus s);

struct FitReport {
  /// mlogit: classes x features with a zero base row; regressions: features x 1.
  Eigen::MatrixXd coefficients;
  double final_objective = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  bool ridge_used = false;
  FitStatus status = FitStatus::Stalled;
};

struct MlogitOptions {
  double tol = 1e-8;
  int max_iterations = 200;
  /// Box bound on every coefficient; hitting it marks the fit as diverged.
  double coefficient_bound = 30.0;
  /// Warm start (classes x features); the base row is ignored.
  std::optional<Eigen::MatrixXd> start;
};

struct OlsOptions {
  /// Relative ridge applied when the weighted cross-product is singular.
  double ridge = 1e-8;
};

/// Weighted multinomial log-likelihood divided by total weight; gradient and
/// Hessian are over the non-base rows, outcome-major.
double mlogit_objective(const DesignSource& data, int num_classes, int base, const Eigen::MatrixXd& coefficients,
                        Eigen::VectorXd* gradient = nullptr, Eigen::MatrixXd* hessian = nullptr);

/// -(1/2) * weighted mean squared residual, with its gradient.
double ols_objective(const DesignSource& data, const Eigen::VectorXd& coefficients,
                     Eigen::VectorXd* gradient = nullptr);

/// Damped Newton with step halving, a ridge fallback for non-invertible
/// Hessians and box-clamped coefficients for separated data.
FitReport fit_weighted_mlogit(const DesignSource& data, int num_classes, int base = 0,
                              const MlogitOptions& options = {});

/// Solves the weighted normal equations.
FitReport fit_weighted_ols(const DesignSource& data, const OlsOptions& options = {});

/// Weighted OLS of log(residual^2) on the features; zero residuals are floored.
FitReport fit_log_variance(const DesignSource& residuals, const OlsOptions& options = {});

/// Weighted OLS of ln((1+c)/(1-c)) on the features, c clamped to |c| <= 1 - 1e-6.
FitReport fit_fisher_link(const DesignSource& covariances, const OlsOptions& options = {});

inline constexpr double kResidualFloor = 1e-300;
inline constexpr double kCovarianceClamp = 1e-6;

}  // namespace labdyn
