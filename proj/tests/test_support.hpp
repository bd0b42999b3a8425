#pragma once

#include <initializer_list>
#include <optional>
#include <string>

#include "labdyn/types.hpp"

namespace labdyn::testing {

inline const std::string kDataDir = LABDYN_DATA_DIR;
inline std::string fixture_params() { return kDataDir + "/published_params.json"; }

struct Spell {
  int year;
  int state;
  std::optional<double> wage = std::nullopt;
};

inline IndividualHistory person(const std::string& id, std::initializer_list<Spell> spells, bool female = false,
                                Education educ = Education::Low, double first_xp = 0.0) {
  IndividualHistory h;
  h.id = id;
  h.zf = {female, educ, first_xp};
  for (const auto& s : spells) {
    YearRecord y;
    y.year = s.year;
    y.state = state_from_code(s.state);
    y.log_wage = s.wage;
    h.years.push_back(y);
  }
  return h;
}

}  // namespace labdyn::testing
