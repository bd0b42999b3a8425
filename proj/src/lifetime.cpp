#include "labdyn/lifetime.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include "labdyn/em.hpp"
#include "labdyn/model.hpp"
#include "labdyn/parallel.hpp"
#include "labdyn/simulate.hpp"

namespace labdyn {

std::string to_string(LifetimeScenario s) {
  switch (s) {
    case LifetimeScenario::JobForLifePublic: return "job_for_life_public";
    case LifetimeScenario::JobForLifePrivate: return "job_for_life_private";
    case LifetimeScenario::MobilityPublicStart: return "mobility_public_start";
    case LifetimeScenario::MobilityPrivateStart: return "mobility_private_start";
    case LifetimeScenario::Unconditional: return "unconditional";
  }
  return "unknown";
}

double retirement_value(double last_log_wage, double beta, double rr, int horizon_years) {
  if (!(beta > 0.0 && beta < 1.0)) throw InvalidInput("beta must lie in (0,1)");
  if (horizon_years < 1) throw InvalidInput("retirement horizon must be >= 1");
  const double factor = -std::expm1(static_cast<double>(horizon_years) * std::log(beta)) / (1.0 - beta);
  return factor * rr * std::exp(last_log_wage);
}

LifetimeValue lifetime_value(const std::vector<YearRecord>& trajectory, double beta, const ReplacementRate& rr,
                             int horizon_years) {
  if (!(beta > 0.0 && beta < 1.0)) throw InvalidInput("beta must lie in (0,1)");
  LifetimeValue v;
  CompensatedSum flow;
  double discount = 1.0;
  std::optional<std::pair<EmploymentState, double>> last;
  for (const auto& y : trajectory) {
    if (is_employed(y.state)) {
      if (!y.log_wage) throw InvalidInput("employed year without a wage in a lifetime trajectory");
      flow.add(discount * std::exp(*y.log_wage));
      last = {y.state, *y.log_wage};
    }
    discount *= beta;
  }
  v.flow = flow.value();
  if (last) {
    v.never_employed = false;
    v.retirement = discount * retirement_value(last->second, beta, rr.for_state(last->first), horizon_years);
  }
  v.value = v.flow + v.retirement;
  return v;
}

std::string to_string(ClassSource s) { return s == ClassSource::Prior ? "prior" : "posterior"; }

ClassSource class_source_from_string(const std::string& s) {
  if (s == "prior") return ClassSource::Prior;
  if (s == "posterior") return ClassSource::Posterior;
  throw InvalidInput("class source must be prior or posterior, got '" + s + "'");
}

void LifetimeOptions::validate() const {
  if (!(beta > 0.0 && beta < 1.0)) throw InvalidInput("beta must lie in (0,1)");
  if (!(rr.pub >= 0.0) || !(rr.pvt >= 0.0)) throw InvalidInput("replacement rates must be >= 0");
  if (horizon_years < 1) throw InvalidInput("retirement horizon must be >= 1");
}

int periods_to_retirement(const FixedCovariates& zf, const LifetimeOptions& options) {
  const double left = static_cast<double>(options.retirement_age) - options.ages.age_at_first(zf);
  return std::max(1, static_cast<int>(std::ceil(left - 1e-12)));
}

namespace {

constexpr const char* kClassTag = "lifetime/classes";
constexpr const char* kStreamTag = "lifetime";

LifetimeResult make_result(const IndividualHistory& h, LifetimeScenario scenario, const ClassDraw& c,
                           const IndividualHistory& sim, const LifetimeOptions& o) {
  LifetimeResult r;
  r.id = h.id;
  r.scenario = scenario;
  r.female = h.zf.female;
  r.educ = h.zf.educ;
  r.observed_start = h.years.front().state;
  r.km = c.km;
  r.ky = c.ky;
  r.periods = static_cast<int>(sim.years.size());
  const LifetimeValue v = lifetime_value(sim.years, o.beta, o.rr, o.horizon_years);
  r.value = v.value;
  r.never_employed = v.never_employed;
  r.log_value = v.never_employed ? std::numeric_limits<double>::quiet_NaN() : std::log(v.value);
  return r;
}

template <typename Fn>
std::vector<LifetimeResult> per_person(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y,
                                       const LifetimeOptions& o, Fn&& run) {
  o.validate();
  theta_m.validate();
  theta_y.validate();
  JointPosterior post;
  if (o.classes == ClassSource::Posterior) post = e_step_joint(panel, theta_m, theta_y);
  std::vector<std::optional<LifetimeResult>> slots(panel.size());
  parallel_for(num_partitions(panel.size()), [&](std::size_t part) {
    const std::size_t end = std::min(panel.size(), (part + 1) * kPartitionSize);
    for (std::size_t i = part * kPartitionSize; i < end; ++i) {
      const auto& h = panel[i];
      if (h.years.empty()) continue;
      SeededStream cls(o.seed, h.id, kClassTag);
      ClassDraw c;
      if (o.classes == ClassSource::Posterior) {
        const int j = cls.categorical(post.prob.row(static_cast<Eigen::Index>(i)).transpose());
        c = {j / post.num_income, j % post.num_income};
      } else {
        c = draw_classes(h.zf, theta_m, theta_y, cls);
      }
      SimulationStreams streams(o.seed, h.id, kStreamTag);
      SimulationSpec spec;
      spec.first_year = h.years.front().year;
      spec.horizon = periods_to_retirement(h.zf, o);
      spec.rho_mode = o.rho_mode;
      slots[i] = run(h, c, spec, streams);
    }
  });
  std::vector<LifetimeResult> out;
  out.reserve(panel.size());
  for (auto& s : slots)
    if (s) out.push_back(std::move(*s));
  return out;
}

}  // namespace

std::vector<LifetimeResult> job_for_life_values(const Panel& panel, EmploymentState sector, const MobilityParams& theta_m,
                                                const IncomeParams& theta_y, const LifetimeOptions& options) {
  if (sector != EmploymentState::PublicFullTime && sector != EmploymentState::PrivateFullTime)
    throw InvalidInput("job-for-life sector must be public or private full-time");
  const auto scenario =
      sector == EmploymentState::PublicFullTime ? LifetimeScenario::JobForLifePublic : LifetimeScenario::JobForLifePrivate;
  return per_person(panel, theta_m, theta_y, options,
                    [&](const IndividualHistory& h, const ClassDraw& c, SimulationSpec spec, SimulationStreams& st) {
                      spec.fixed_state = sector;
                      // keep the individual's position in the wage distribution
                      const auto& first = h.years.front();
                      if (is_employed(first.state) && first.log_wage) {
                        const double m = income_mean(first.state, first.zv, h.zf, c.ky, theta_y);
                        const double sd = income_sd(first.state, first.zv, h.zf, c.km, c.ky, theta_y);
                        spec.initial_ytilde = (*first.log_wage - m) / sd;
                      }
                      const auto sim = simulate_individual(h.id, h.zf, c.km, c.ky, theta_m, theta_y, spec, st);
                      return make_result(h, scenario, c, sim, options);
                    });
}

std::vector<LifetimeResult> mobility_values(const Panel& panel, StartCondition start, const MobilityParams& theta_m,
                                            const IncomeParams& theta_y, const LifetimeOptions& options) {
  Panel chosen;
  const Panel* src = &panel;
  LifetimeScenario scenario = LifetimeScenario::Unconditional;
  if (start != StartCondition::Unconditional) {
    const auto want = start == StartCondition::ObservedPublic ? EmploymentState::PublicFullTime : EmploymentState::PrivateFullTime;
    scenario = start == StartCondition::ObservedPublic ? LifetimeScenario::MobilityPublicStart
                                                       : LifetimeScenario::MobilityPrivateStart;
    for (const auto& h : panel)
      if (!h.years.empty() && h.years.front().state == want) chosen.push_back(h);
    src = &chosen;
  }
  return per_person(*src, theta_m, theta_y, options,
                    [&](const IndividualHistory& h, const ClassDraw& c, SimulationSpec spec, SimulationStreams& st) {
                      const auto& first = h.years.front();
                      spec.initial_state = first.state;
                      if (is_employed(first.state)) spec.initial_log_wage = first.log_wage;
                      const auto sim = simulate_individual(h.id, h.zf, c.km, c.ky, theta_m, theta_y, spec, st);
                      return make_result(h, scenario, c, sim, options);
                    });
}

double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw InvalidInput("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("quantile level must lie in [0, 1]");
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::vector<int> default_percentiles() {
  std::vector<int> g(99);
  for (int i = 0; i < 99; ++i) g[static_cast<std::size_t>(i)] = i + 1;
  return g;
}

PremiumCurve premium_curve(std::vector<double> log_a, std::vector<double> log_b, const std::vector<int>& percentiles) {
  if (log_a.empty() || log_b.empty()) throw InvalidInput("premium curve needs two non-empty groups");
  for (std::size_t i = 0; i < percentiles.size(); ++i) {
    if (percentiles[i] < 1 || percentiles[i] > 99) throw InvalidInput("percentiles must lie in 1..99");
    if (i > 0 && percentiles[i] <= percentiles[i - 1]) throw InvalidInput("percentile grid must be strictly increasing");
  }
  std::sort(log_a.begin(), log_a.end());
  std::sort(log_b.begin(), log_b.end());
  PremiumCurve c;
  c.percentiles = percentiles;
  c.n_a = log_a.size();
  c.n_b = log_b.size();
  c.wide_uncertainty = c.n_a < kMinCurveGroup || c.n_b < kMinCurveGroup;
  for (int p : percentiles) {
    const double q = p / 100.0;
    c.log_diff.push_back(quantile_sorted(log_a, q) - quantile_sorted(log_b, q));
  }
  return c;
}

std::vector<double> log_values(const std::vector<LifetimeResult>& results,
                               const std::function<bool(const LifetimeResult&)>& keep) {
  std::vector<double> v;
  for (const auto& r : results)
    if (!r.never_employed && (!keep || keep(r))) v.push_back(r.log_value);
  return v;
}

std::vector<int> sign_changes(const PremiumCurve& curve) {
  std::vector<int> out;
  for (std::size_t i = 1; i < curve.log_diff.size(); ++i)
    if ((curve.log_diff[i - 1] > 0.0) != (curve.log_diff[i] > 0.0)) out.push_back(curve.percentiles[i]);
  return out;
}

Counterfactuals run_counterfactuals(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y,
                                    const LifetimeOptions& options) {
  Counterfactuals cf;
  cf.jfl_public = job_for_life_values(panel, EmploymentState::PublicFullTime, theta_m, theta_y, options);
  cf.jfl_private = job_for_life_values(panel, EmploymentState::PrivateFullTime, theta_m, theta_y, options);
  cf.mobility = mobility_values(panel, StartCondition::Unconditional, theta_m, theta_y, options);

  using Keep = std::function<bool(const LifetimeResult&)>;
  auto starts = [](EmploymentState s, Keep extra = {}) -> Keep {
    return [s, extra](const LifetimeResult& r) { return r.observed_start == s && (!extra || extra(r)); };
  };
  auto add = [&](const std::string& name, const std::string& a_name, const std::vector<double>& a,
                 const std::string& b_name, const std::vector<double>& b) {
    if (a.empty() || b.empty()) return;
    cf.curves.push_back({name, a_name, b_name, premium_curve(a, b)});
  };

  const auto pub = EmploymentState::PublicFullTime, pvt = EmploymentState::PrivateFullTime;
  std::vector<std::pair<std::string, Keep>> groups = {{"all", {}}};
  groups.push_back({"male", [](const LifetimeResult& r) { return !r.female; }});
  groups.push_back({"female", [](const LifetimeResult& r) { return r.female; }});
  groups.push_back({"educ_low", [](const LifetimeResult& r) { return r.educ == Education::Low; }});
  groups.push_back({"educ_medium", [](const LifetimeResult& r) { return r.educ == Education::Medium; }});
  groups.push_back({"educ_high", [](const LifetimeResult& r) { return r.educ == Education::High; }});

  for (const auto& [g, keep] : groups) {
    add("premium_with_selection/" + g, "job_for_life_public|public_starters", log_values(cf.jfl_public, starts(pub, keep)),
        "job_for_life_private|private_starters", log_values(cf.jfl_private, starts(pvt, keep)));
    add("premium_without_selection/" + g, "job_for_life_public|all", log_values(cf.jfl_public, keep),
        "job_for_life_private|all", log_values(cf.jfl_private, keep));
  }
  add("loss/public_starters", "job_for_life_public|public_starters", log_values(cf.jfl_public, starts(pub)),
      "mobility|public_starters", log_values(cf.mobility, starts(pub)));
  add("loss/private_starters", "job_for_life_private|private_starters", log_values(cf.jfl_private, starts(pvt)),
      "mobility|private_starters", log_values(cf.mobility, starts(pvt)));
  return cf;
}

namespace {

std::string num(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

std::string rr_label(const ReplacementRate& rr) { return rr.pub == rr.pvt ? num(rr.pub) : num(rr.pub) + "/" + num(rr.pvt); }

std::string curves_to_csv(const std::vector<NamedCurve>& curves, const LifetimeOptions& options) {
  std::string s = "percentile,log_diff,group_a,group_b,scenario,RR,beta,seed,n_a,n_b,wide_uncertainty\n";
  const std::string tail = "," + rr_label(options.rr) + "," + num(options.beta) + "," + std::to_string(options.seed);
  for (const auto& nc : curves)
    for (std::size_t i = 0; i < nc.curve.percentiles.size(); ++i)
      s += std::to_string(nc.curve.percentiles[i]) + "," + num(nc.curve.log_diff[i]) + "," + nc.group_a + "," +
           nc.group_b + "," + nc.name + tail + "," + std::to_string(nc.curve.n_a) + "," +
           std::to_string(nc.curve.n_b) + "," + (nc.curve.wide_uncertainty ? "1" : "0") + "\n";
  return s;
}

std::string results_to_csv(const std::vector<LifetimeResult>& results) {
  std::string s = "person_id,scenario,value,log_value,never_employed,female,educ,observed_start,km,ky,periods\n";
  for (const auto& r : results)
    s += r.id + "," + to_string(r.scenario) + "," + num(r.value) + "," + (r.never_employed ? "" : num(r.log_value)) +
         "," + (r.never_employed ? "1" : "0") + "," + (r.female ? "1" : "0") + "," +
         std::to_string(static_cast<int>(r.educ)) + "," + std::to_string(code(r.observed_start)) + "," +
         std::to_string(r.km) + "," + std::to_string(r.ky) + "," + std::to_string(r.periods) + "\n";
  return s;
}

}  // namespace labdyn
