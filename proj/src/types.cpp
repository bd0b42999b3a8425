#include "labdyn/types.hpp"

namespace labdyn {

std::string to_string(RhoMode m) {
  return m == RhoMode::PaperFormula ? "paper_formula" : "correlation_consistent";
}

RhoMode rho_mode_from_string(const std::string& s) {
  if (s == "paper_formula") return RhoMode::PaperFormula;
  if (s == "correlation_consistent") return RhoMode::CorrelationConsistent;
  throw InvalidInput("unknown rho mode: " + s);
}

}  // namespace labdyn
