#include <doctest.h>

#include <cmath>

#include "labdyn/diagnostics.hpp"
#include "labdyn/model.hpp"
#include "labdyn/parallel.hpp"
#include "labdyn/params_io.hpp"
#include "labdyn/simulate.hpp"
#include "test_support.hpp"

using namespace labdyn;

namespace {
const ParameterFile& fixture() {
  static const ParameterFile pf = load_params(testing::fixture_params());
  return pf;
}

const Panel& big_panel() {
  static const Panel p = generate_panel({}, fixture().mobility, fixture().income, 20000, 8, 11);
  return p;
}

// zero income block with a constant tau
IncomeParams constant_tau(double tau) {
  IncomeParams y = IncomeParams::zeros(1, 1);
  y.xi[y.designs().xi().index_of("const")] = std::log((1.0 + tau) / (1.0 - tau));
  return y;
}

struct Ar1 {
  double var = 0.0, lag1 = 0.0;
};

Ar1 ar1_moments(double tau, RhoMode mode) {
  const MobilityParams m = MobilityParams::zeros(1);
  const IncomeParams y = constant_tau(tau);
  SimulationSpec spec;
  spec.horizon = 40;
  spec.fixed_state = EmploymentState::PublicFullTime;
  spec.rho_mode = mode;
  double sxx = 0, sxy = 0, n = 0, npair = 0, s = 0;
  for (int i = 0; i < 5000; ++i) {
    SimulationStreams st(3, person_id(i), "ar1");
    const auto h = simulate_individual(person_id(i), {}, 0, 0, m, y, spec, st);
    for (std::size_t t = 0; t < h.years.size(); ++t) {
      const double w = *h.years[t].log_wage;
      s += w;
      sxx += w * w;
      n += 1;
      if (t > 0) {
        sxy += w * *h.years[t - 1].log_wage;
        npair += 1;
      }
    }
  }
  const double mean = s / n;
  const double var = sxx / n - mean * mean;
  return {var, (sxy / npair - mean * mean) / var};
}
}  // namespace

TEST_CASE("streams depend only on their key") {
  SeededStream a(5, "p1", "states"), b(5, "p1", "states"), c(5, "p2", "states"), d(5, "p1", "wages");
  for (int i = 0; i < 10; ++i) {
    const double u = a.uniform();
    CHECK(u == b.uniform());
    CHECK(u != c.uniform());
    CHECK(u != d.uniform());
  }
  CHECK(stream_key(1, "a", "b") != stream_key(1, "ab", ""));
}

TEST_CASE("categorical draws invert the cdf") {
  SeededStream s(1, "c", "t");
  Eigen::VectorXd p(3);
  p << 0.2, 0.0, 0.8;
  std::array<int, 3> hits{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++hits[s.categorical(p)];
  CHECK(hits[1] == 0);
  CHECK(std::abs(hits[0] / double(n) - 0.2) < 3 * std::sqrt(0.16 / n));
}

TEST_CASE("generation is reproducible and thread independent") {
  set_num_threads(1);
  const auto a = generate_panel({}, fixture().mobility, fixture().income, 600, 8, 42);
  set_num_threads(8);
  const auto b = generate_panel({}, fixture().mobility, fixture().income, 600, 8, 42);
  set_num_threads(1);
  CHECK(panel_to_csv(a) == panel_to_csv(b));
  const auto c = generate_panel({}, fixture().mobility, fixture().income, 600, 8, 43);
  CHECK(panel_to_csv(a) != panel_to_csv(c));
  // a prefix of individuals does not depend on N
  const auto d = generate_panel({}, fixture().mobility, fixture().income, 300, 8, 42);
  CHECK(d[299].years.back().log_wage == a[299].years.back().log_wage);
}

TEST_CASE("generated panels obey the structural rules") {
  const auto& p = big_panel();
  for (const auto& h : p) {
    REQUIRE(h.years.size() == 8);
    REQUIRE(h.km.has_value());
    REQUIRE(h.ky.has_value());
    double xp = h.zf.first_xp;
    for (std::size_t t = 0; t < h.years.size(); ++t) {
      const auto& y = h.years[t];
      CHECK(y.log_wage.has_value() == is_employed(y.state));
      CHECK(y.zv.xp == doctest::Approx(xp).epsilon(1e-12));
      if (is_employed(y.state)) xp += kExperienceStep;
    }
  }
}

TEST_CASE("education and gender shares match the population spec") {
  const auto& p = big_panel();
  const double n = static_cast<double>(p.size());
  double female = 0, low = 0, med = 0;
  for (const auto& h : p) {
    female += h.zf.female;
    low += h.zf.educ == Education::Low;
    med += h.zf.educ == Education::Medium;
  }
  CHECK(std::abs(female / n - 0.5) < 3 * std::sqrt(0.25 / n));
  CHECK(std::abs(low / n - 0.69) < 3 * std::sqrt(0.69 * 0.31 / n));
  CHECK(std::abs(med / n - 0.16) < 3 * std::sqrt(0.16 * 0.84 / n));
}

TEST_CASE("fixture stylised facts") {
  const auto& p = big_panel();
  const auto m = transition_matrix(p);
  const auto stay = [&](EmploymentState s) { return m.prob(code(s), code(s)); };
  CHECK(stay(EmploymentState::PublicFullTime) > stay(EmploymentState::PrivateFullTime));
  CHECK(stay(EmploymentState::PrivateFullTime) > stay(EmploymentState::PublicPartTime));
  CHECK(stay(EmploymentState::PublicPartTime) > stay(EmploymentState::PrivatePartTime));

  const auto men = transition_matrix(p, [](const IndividualHistory& h) { return !h.zf.female; });
  const auto women = transition_matrix(p, [](const IndividualHistory& h) { return h.zf.female; });
  const double ratio = women.prob(1, 3) / men.prob(1, 3);
  CHECK(ratio > 1.5);
  CHECK(ratio < 3.0);

  std::array<double, 4> share{};
  for (const auto& h : p) share[*h.km] += 1.0 / p.size();
  const std::array<double, 4> expected{0.42, 0.04, 0.47, 0.07};
  for (int k = 0; k < 4; ++k) CHECK(std::abs(share[k] - expected[k]) < 0.05);
}

TEST_CASE("transition frequencies match the model probabilities") {
  const auto& pf = fixture();
  const FixedCovariates zf{true, Education::Medium, 1.0};
  const auto zv = TimeVaryingCovariates::at(1.0);
  const Eigen::VectorXd p = transition_probs(EmploymentState::PrivateFullTime, zv, zf, 2, pf.mobility);
  SeededStream s(9, "freq", "t");
  Eigen::VectorXd hits = Eigen::VectorXd::Zero(kNumStates);
  const int n = 200000;
  for (int i = 0; i < n; ++i) hits[s.categorical(p)] += 1;
  for (int j = 0; j < kNumStates; ++j) CHECK(std::abs(hits[j] / n - p[j]) <= 3 * std::sqrt(p[j] * (1 - p[j]) / n) + 1e-12);
}

TEST_CASE("employed runs follow an AR(1) with tau as the autocorrelation") {
  const auto zero = ar1_moments(0.0, RhoMode::CorrelationConsistent);
  CHECK(std::abs(zero.lag1) < 0.02);
  CHECK(std::abs(zero.var - 1.0) < 0.02);
  const auto half = ar1_moments(0.5, RhoMode::CorrelationConsistent);
  CHECK(std::abs(half.lag1 - 0.5) < 0.02);
  CHECK(std::abs(half.var - 1.0) < 0.02);
}

TEST_CASE("job for life keeps the state and all wages") {
  SimulationSpec spec;
  spec.horizon = 30;
  spec.fixed_state = EmploymentState::PrivatePartTime;
  SimulationStreams st(1, "j", "jfl");
  const auto h = simulate_individual("j", {}, 0, 0, fixture().mobility, fixture().income, spec, st);
  REQUIRE(h.years.size() == 30);
  for (std::size_t t = 0; t < h.years.size(); ++t) {
    CHECK(h.years[t].state == EmploymentState::PrivatePartTime);
    CHECK(h.years[t].zv.xp == doctest::Approx(0.1 * t).epsilon(1e-12));
  }
}

TEST_CASE("population spec text round trip and validation") {
  PopulationSpec s;
  s.female_share = 0.3;
  const auto back = population_from_text(to_text(s));
  CHECK(back.female_share == 0.3);
  CHECK_THROWS_AS(population_from_text("bogus = 1\n"), InvalidInput);
  CHECK_THROWS_AS(population_from_text("educ_low = 0.9\n"), InvalidInput);
}

TEST_CASE("predict keeps the first spell out of sample") {
  const auto& obs = big_panel();
  const Panel head(obs.begin(), obs.begin() + 500);
  const auto r = predict_panel(head, fixture().mobility, fixture().income, 4);
  REQUIRE(r.panel.size() == head.size());
  for (std::size_t i = 0; i < head.size(); ++i) {
    CHECK(r.panel[i].years.front().state == head[i].years.front().state);
    CHECK(r.panel[i].years.front().log_wage == head[i].years.front().log_wage);
    CHECK(r.panel[i].years.size() == head[i].years.size());
  }
  PredictOptions in;
  in.in_sample = true;
  const auto q = predict_panel(head, fixture().mobility, fixture().income, 4, in);
  int same = 0;
  for (std::size_t i = 0; i < head.size(); ++i) same += q.panel[i].years.front().state == head[i].years.front().state;
  CHECK(same < static_cast<int>(head.size()));
}
