#include "labdyn/simulate.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "labdyn/math.hpp"
#include "labdyn/model.hpp"
#include "labdyn/parallel.hpp"

namespace labdyn {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t stream_key(std::uint64_t seed, std::string_view id, std::string_view tag) {
  std::uint64_t h = fnv1a(id);
  h = fnv1a(std::string_view("\x1f", 1), h);
  h = fnv1a(tag, h);
  std::uint64_t state = seed ^ 0x6a09e667f3bcc908ULL;
  const std::uint64_t a = splitmix64(state);
  state ^= h;
  return a ^ splitmix64(state);
}

SeededStream::SeededStream(std::uint64_t seed, std::string_view id, std::string_view tag) {
  std::uint64_t state = stream_key(seed, id, tag);
  std::seed_seq seq{static_cast<std::uint32_t>(splitmix64(state)), static_cast<std::uint32_t>(splitmix64(state)),
                    static_cast<std::uint32_t>(splitmix64(state)), static_cast<std::uint32_t>(splitmix64(state))};
  engine_.seed(seq);
}

double SeededStream::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double SeededStream::normal() { return normal_(engine_); }

int SeededStream::categorical(const Eigen::Ref<const Eigen::VectorXd>& probs) {
  const double u = uniform();
  double acc = 0.0;
  int last = -1;
  for (Eigen::Index j = 0; j < probs.size(); ++j) {
    if (probs[j] <= 0.0) continue;
    last = static_cast<int>(j);
    acc += probs[j];
    if (u < acc) return last;
  }
  if (last < 0) throw InvalidInput("categorical draw from an all-zero probability vector");
  return last;
}

SimulationStreams::SimulationStreams(std::uint64_t seed, std::string_view id, std::string_view purpose)
    : states(seed, id, std::string(purpose) + "/states"), wages(seed, id, std::string(purpose) + "/wages") {}

ClassDraw draw_classes(const FixedCovariates& zf, const MobilityParams& theta_m, const IncomeParams& theta_y,
                       SeededStream& stream) {
  ClassDraw d;
  d.km = stream.categorical(class_prior_mobility(zf, theta_m));
  d.ky = stream.categorical(class_prior_income(zf, d.km, theta_y));
  return d;
}

IndividualHistory simulate_individual(const std::string& id, const FixedCovariates& zf, int km, int ky,
                                      const MobilityParams& theta_m, const IncomeParams& theta_y,
                                      const SimulationSpec& spec, SimulationStreams& streams) {
  if (spec.horizon < 1) throw InvalidInput("simulation horizon must be >= 1");
  IndividualHistory h;
  h.id = id;
  h.zf = zf;
  h.km = km;
  h.ky = ky;
  h.years.reserve(static_cast<std::size_t>(spec.horizon));

  double xp = zf.first_xp;
  double prev_ytilde = 0.0;
  for (int t = 0; t < spec.horizon; ++t) {
    YearRecord rec;
    rec.year = spec.first_year + t;
    rec.zv = TimeVaryingCovariates::at(xp);

    const double u = streams.states.uniform();
    const double eps = streams.wages.normal();
    Eigen::VectorXd probs;
    if (spec.fixed_state) {
      rec.state = *spec.fixed_state;
    } else if (t == 0) {
      if (spec.initial_state) {
        rec.state = *spec.initial_state;
      } else {
        probs = initial_state_probs(zf, km, theta_m);
      }
    } else {
      const auto& prev = h.years.back();
      probs = transition_probs(prev.state, prev.zv, zf, km, theta_m);
    }
    if (probs.size() > 0) {
      double acc = 0.0;
      int pick = kNumStates - 1;
      for (int s = 0; s < kNumStates; ++s) {
        acc += probs[s];
        if (u < acc) {
          pick = s;
          break;
        }
      }
      rec.state = static_cast<EmploymentState>(pick);
    }

    if (is_employed(rec.state)) {
      const double m = income_mean(rec.state, rec.zv, zf, ky, theta_y);
      const double sd = income_sd(rec.state, rec.zv, zf, km, ky, theta_y);
      const bool continues = t > 0 && is_employed(h.years.back().state);
      double yt = eps;
      if (continues) {
        const auto& prev = h.years.back();
        const Correlation tau =
            pair_correlation(rec.state, prev.state, rec.zv, prev.zv, km, ky, theta_y).clamped(kCorrelationClamp);
        double r = tau.value();
        if (spec.rho_mode == RhoMode::PaperFormula) r = rho_from_sigma_tau(sd * sd, tau.value());
        const double innov = spec.rho_mode == RhoMode::PaperFormula ? std::sqrt((1.0 - r) * (1.0 + r))
                                                                     : std::sqrt(tau.one_minus_sq());
        yt = r * prev_ytilde + innov * eps;
      } else if (t == 0 && spec.initial_log_wage) {
        yt = (*spec.initial_log_wage - m) / sd;
      } else if (t == 0 && spec.initial_ytilde) {
        yt = *spec.initial_ytilde;
      }
      if (t == 0 && spec.initial_log_wage) rec.log_wage = *spec.initial_log_wage;
      else rec.log_wage = m + sd * yt;
      prev_ytilde = yt;
      xp += kExperienceStep;
    }
    h.years.push_back(rec);
  }
  return h;
}

void PopulationSpec::validate() const {
  auto share = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput(std::string(name) + " must lie in [0, 1]");
  };
  share(female_share, "female_share");
  share(educ_low, "educ_low");
  share(educ_med, "educ_med");
  share(educ_high, "educ_high");
  if (std::abs(educ_low + educ_med + educ_high - 1.0) > 1e-9)
    throw InvalidInput("education shares must sum to 1 within 1e-9");
  if (!(first_xp_min >= 0.0) || !(first_xp_max >= first_xp_min) || !std::isfinite(first_xp_max))
    throw InvalidInput("first_xp range must satisfy 0 <= min <= max");
  if (!std::isfinite(ages.base_age) || !std::isfinite(ages.per_decade)) throw InvalidInput("entry age rule must be finite");
}

PopulationSpec population_from_text(const std::string& text) {
  PopulationSpec spec;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (strip(line).empty()) continue;
    if (eq == std::string::npos) throw InvalidInput("population spec line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = strip(line.substr(0, eq));
    const std::string val = strip(line.substr(eq + 1));
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(val, &used);
      if (used != val.size()) throw std::invalid_argument(val);
    } catch (const std::exception&) {
      throw InvalidInput("population spec line " + std::to_string(lineno) + ": bad number for " + key);
    }
    if (key == "female_share") spec.female_share = v;
    else if (key == "educ_low") spec.educ_low = v;
    else if (key == "educ_med") spec.educ_med = v;
    else if (key == "educ_high") spec.educ_high = v;
    else if (key == "first_xp_min") spec.first_xp_min = v;
    else if (key == "first_xp_max") spec.first_xp_max = v;
    else if (key == "first_year") spec.first_year = static_cast<int>(v);
    else if (key == "entry_age_base") spec.ages.base_age = v;
    else if (key == "entry_age_per_decade") spec.ages.per_decade = v;
    else throw InvalidInput("population spec line " + std::to_string(lineno) + ": unknown key " + key);
  }
  spec.validate();
  return spec;
}

std::string to_text(const PopulationSpec& spec) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "female_share = %.17g\neduc_low = %.17g\neduc_med = %.17g\neduc_high = %.17g\n"
                "first_xp_min = %.17g\nfirst_xp_max = %.17g\nfirst_year = %d\n"
                "entry_age_base = %.17g\nentry_age_per_decade = %.17g\n",
                spec.female_share, spec.educ_low, spec.educ_med, spec.educ_high, spec.first_xp_min,
                spec.first_xp_max, spec.first_year, spec.ages.base_age, spec.ages.per_decade);
  return buf;
}

FixedCovariates draw_covariates(const PopulationSpec& spec, SeededStream& stream) {
  FixedCovariates zf;
  zf.female = stream.uniform() < spec.female_share;
  Eigen::Vector3d shares(spec.educ_low, spec.educ_med, spec.educ_high);
  zf.educ = static_cast<Education>(stream.categorical(shares));
  zf.first_xp = spec.first_xp_min + (spec.first_xp_max - spec.first_xp_min) * stream.uniform();
  return zf;
}

std::string person_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%07zu", i + 1);
  return buf;
}

Panel generate_panel(const PopulationSpec& population, const MobilityParams& theta_m, const IncomeParams& theta_y,
                     std::size_t n, int years, std::uint64_t seed, RhoMode rho_mode) {
  population.validate();
  if (n < 1) throw InvalidInput("panel size must be >= 1");
  if (years < 3) throw InvalidInput("panel must span at least 3 years");
  theta_m.validate();
  theta_y.validate();
  if (theta_y.num_mobility_classes != theta_m.num_classes())
    throw InvalidInput("income parameters were built for a different number of mobility classes");

  Panel panel(n);
  parallel_for(num_partitions(n), [&](std::size_t part) {
    const std::size_t end = std::min(n, (part + 1) * kPartitionSize);
    for (std::size_t i = part * kPartitionSize; i < end; ++i) {
      const std::string id = person_id(i);
      SeededStream cov(seed, id, "covariates");
      const FixedCovariates zf = draw_covariates(population, cov);
      SeededStream cls(seed, id, "classes");
      const ClassDraw c = draw_classes(zf, theta_m, theta_y, cls);
      SimulationStreams streams(seed, id, "generate");
      SimulationSpec spec;
      spec.first_year = population.first_year;
      spec.horizon = years;
      spec.rho_mode = rho_mode;
      panel[i] = simulate_individual(id, zf, c.km, c.ky, theta_m, theta_y, spec, streams);
    }
  });
  return panel;
}

PredictResult predict_panel(const Panel& observed, const MobilityParams& theta_m, const IncomeParams& theta_y,
                            std::uint64_t seed, const PredictOptions& options) {
  PredictResult out;
  std::vector<std::optional<IndividualHistory>> results(observed.size());
  parallel_for(num_partitions(observed.size()), [&](std::size_t part) {
    const std::size_t end = std::min(observed.size(), (part + 1) * kPartitionSize);
    for (std::size_t i = part * kPartitionSize; i < end; ++i) {
      const auto& h = observed[i];
      if (h.years.empty()) continue;
      const auto& first = h.years.front();
      const int span = h.years.back().year - first.year;
      const int extra = options.horizon ? *options.horizon : span;
      if (extra < 0) throw InvalidInput("prediction horizon must be >= 0");
      if (extra == 0 && !options.in_sample) {
        IndividualHistory kept = h;
        kept.years.resize(1);
        results[i] = std::move(kept);
        continue;
      }
      SeededStream cls(seed, h.id, "predict/classes");
      const ClassDraw c = draw_classes(h.zf, theta_m, theta_y, cls);
      SimulationStreams streams(seed, h.id, "predict");
      SimulationSpec spec;
      spec.first_year = first.year;
      spec.horizon = extra + 1;
      spec.rho_mode = options.rho_mode;
      if (!options.in_sample) {
        spec.initial_state = first.state;
        if (is_employed(first.state)) spec.initial_log_wage = first.log_wage;
      }
      auto sim = simulate_individual(h.id, h.zf, c.km, c.ky, theta_m, theta_y, spec, streams);
      results[i] = std::move(sim);
    }
  });
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (results[i]) out.panel.push_back(std::move(*results[i]));
    else out.report.note(0, observed[i].id, "no observed first spell; individual skipped");
  }
  return out;
}

}  // namespace labdyn
