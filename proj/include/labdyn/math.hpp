#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "labdyn/types.hpp"

namespace labdyn {

template <typename T>
inline constexpr T kLogTwoPi = T(1.8378770664093454835606594728112352797227949472755668L);

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::DenseBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) return -std::numeric_limits<Scalar>::infinity();
  const Scalar m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.derived().array() - m).exp().sum());
}

/// Softmax of a score vector, shifted by its maximum.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(const Eigen::MatrixBase<Derived>& scores) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = scores.maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> p = (scores.array() - m).exp().matrix();
  p /= p.sum();
  return p;
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> log_softmax(const Eigen::MatrixBase<Derived>& scores) {
  const auto lse = log_sum_exp(scores);
  return (scores.array() - lse).matrix();
}

template <typename T>
T logistic(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T normal_logpdf(T x) {
  return T(-0.5) * kLogTwoPi<T> - T(0.5) * x * x;
}

/// A correlation coefficient in (-1, 1) that also carries its distance to the
/// nearest bound, so values within ~1e-13 of +-1 keep full relative precision.
class Correlation {
 public:
  Correlation() = default;

  /// tau = -1 + 2 * logistic(score) = tanh(score / 2).
  static Correlation from_score(double score) {
    Correlation c;
    const double a = std::abs(score);
    c.value_ = std::tanh(0.5 * score);
    c.gap_ = 2.0 / (1.0 + std::exp(a));
    return c;
  }

  static Correlation from_value(double tau) {
    if (!(std::abs(tau) < 1.0)) throw InvalidInput("correlation must lie strictly inside (-1, 1)");
    Correlation c;
    c.value_ = tau;
    c.gap_ = 1.0 - std::abs(tau);
    return c;
  }

  double value() const noexcept { return value_; }
  /// 1 - |value|, computed without cancellation.
  double gap() const noexcept { return gap_; }
  /// 1 - value^2 = gap * (2 - gap).
  double one_minus_sq() const noexcept { return gap_ * (2.0 - gap_); }

  Correlation clamped(double min_gap) const noexcept {
    if (gap_ >= min_gap) return *this;
    Correlation c;
    c.gap_ = min_gap;
    c.value_ = std::copysign(1.0 - min_gap, value_);
    return c;
  }

 private:
  double value_ = 0.0;
  double gap_ = 1.0;
};

inline constexpr double kCorrelationClamp = 1e-9;

/// f(c) = ln((1 + c) / (1 - c)); inverse of Correlation::from_score.
inline double fisher_link(double c) {
  if (!(std::abs(c) < 1.0)) throw InvalidInput("fisher_link requires |c| < 1");
  return std::log1p(c) - std::log1p(-c);
}

inline double fisher_link(const Correlation& c) {
  const double g = c.gap();
  return std::copysign(std::log(2.0 - g) - std::log(g), c.value());
}

/// Persistence of an AR(1) whose lag-1 autocovariance is tau given innovation
/// variance sigma_sq: the positive-discriminant root of tau*rho^2 + sigma_sq*rho - tau = 0.
/// Written as 2*tau / (sigma_sq + sqrt(sigma_sq^2 + 4 tau^2)) so tau -> 0 is continuous.
template <typename T>
T rho_from_sigma_tau(T sigma_sq, T tau) {
  if (tau == T(0)) return T(0);
  const T disc = std::sqrt(sigma_sq * sigma_sq + T(4) * tau * tau);
  return T(2) * tau / (sigma_sq + disc);
}

/// Log density of a standardized bivariate normal with correlation tau.
template <typename T>
T bivariate_normal_logpdf(T a, T b, T tau) {
  if (!(std::abs(tau) < T(1))) throw InvalidInput("bivariate_normal_logpdf requires |tau| < 1");
  const T d = (T(1) - tau) * (T(1) + tau);
  return -kLogTwoPi<T> - T(0.5) * std::log(d) - (a * a - T(2) * tau * a * b + b * b) / (T(2) * d);
}

/// log phi2(a, b; tau) - log phi(b): the conditional density of a given b.
inline double conditional_normal_logpdf(double a, double b, const Correlation& tau) {
  const double d = tau.one_minus_sq();
  const double r = a - tau.value() * b;
  return -0.5 * kLogTwoPi<double> - 0.5 * std::log(d) - r * r / (2.0 * d);
}

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  CompensatedSum& operator+=(double x) noexcept {
    add(x);
    return *this;
  }
  CompensatedSum& operator+=(const CompensatedSum& o) noexcept {
    add(o.sum_);
    add(o.comp_);
    return *this;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace labdyn
