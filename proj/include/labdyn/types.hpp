#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace labdyn {

/// Person-year labour-market status.
enum class EmploymentState : std::uint8_t {
  NonEmployed = 0,
  PrivateFullTime = 1,
  PublicFullTime = 2,
  PrivatePartTime = 3,
  PublicPartTime = 4,
};

inline constexpr int kNumStates = 5;

inline constexpr int code(EmploymentState s) noexcept { return static_cast<int>(s); }
inline constexpr bool is_employed(EmploymentState s) noexcept { return s != EmploymentState::NonEmployed; }
inline constexpr bool is_public(EmploymentState s) noexcept {
  return s == EmploymentState::PublicFullTime || s == EmploymentState::PublicPartTime;
}

/// Thrown for inputs that violate a documented precondition.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// File-system or stream failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline EmploymentState state_from_code(int c) {
  if (c < 0 || c >= kNumStates) throw InvalidInput("employment state code out of range: " + std::to_string(c));
  return static_cast<EmploymentState>(c);
}

enum class Education : std::uint8_t { Low = 0, Medium = 1, High = 2 };

struct FixedCovariates {
  bool female = false;
  Education educ = Education::Low;
  double first_xp = 0.0;  // decades of experience at first observation
};

struct TimeVaryingCovariates {
  double xp = 0.0;     // decades of cumulative employment
  double xp_sq = 0.0;  // always xp * xp

  static TimeVaryingCovariates at(double xp) noexcept { return {xp, xp * xp}; }
};

/// Experience gained by one employed year, in decades.
inline constexpr double kExperienceStep = 0.1;

struct YearRecord {
  int year = 0;
  EmploymentState state = EmploymentState::NonEmployed;
  std::optional<double> log_wage;
  TimeVaryingCovariates zv;
};

struct IndividualHistory {
  std::string id;
  FixedCovariates zf;
  std::vector<YearRecord> years;
  // Latent classes, known only for simulated panels.
  std::optional<int> km;
  std::optional<int> ky;
};

using Panel = std::vector<IndividualHistory>;

/// Post-retirement replacement rate, either common or sector specific.
struct ReplacementRate {
  double pub = 0.4;
  double pvt = 0.4;

  static ReplacementRate common(double rr) noexcept { return {rr, rr}; }
  double for_state(EmploymentState s) const noexcept { return is_public(s) ? pub : pvt; }
};

enum class RhoMode { CorrelationConsistent, PaperFormula };

struct ModelConfig {
  int num_mobility_classes = 4;
  int num_income_classes = 3;
  double beta = 0.95;
  ReplacementRate replacement_rate{};
  int retirement_age = 60;
  int retirement_horizon_years = 22;
  double em_tol = 1e-3;
  double kernel_tol = 1e-8;
  int em_max_iterations = 500;
  RhoMode rho_mode = RhoMode::CorrelationConsistent;

  void validate() const {
    if (num_mobility_classes < 1 || num_income_classes < 1) throw InvalidInput("class counts must be >= 1");
    if (!(beta > 0.0 && beta < 1.0)) throw InvalidInput("beta must lie in (0,1)");
    if (retirement_horizon_years < 1) throw InvalidInput("retirement horizon must be >= 1");
    if (!(em_tol > 0.0) || !(kernel_tol > 0.0)) throw InvalidInput("tolerances must be positive");
  }
};

std::string to_string(RhoMode m);
RhoMode rho_mode_from_string(const std::string& s);

}  // namespace labdyn
