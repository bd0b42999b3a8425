#include <doctest.h>

#include <string>

#include "labdyn/params_io.hpp"
#include "test_support.hpp"

using namespace labdyn;

TEST_CASE("fixture loads with the published class-1 female coefficient") {
  const ParameterFile pf = load_params(testing::fixture_params());
  const auto& d = pf.mobility.designs();
  CHECK(pf.mobility.kappa_m(1, d.kappa_m().index_of("female")) == -0.233);
  CHECK(pf.mobility.kappa_m(1, d.kappa_m().index_of("educ_high")) == -20.756);
  CHECK(pf.mobility.num_classes() == 4);
  CHECK(pf.income.num_classes() == 3);
  CHECK(pf.mobility.kappa_m.row(0).isZero());
}

TEST_CASE("save then load is byte-identical") {
  const ParameterFile pf = load_params(testing::fixture_params());
  const std::string text = to_text(pf);
  CHECK(to_text(params_from_text(text)) == text);
  CHECK(params_from_text(text).mobility.flatten() == pf.mobility.flatten());
  CHECK(params_from_text(text).income.flatten() == pf.income.flatten());
}

TEST_CASE("mutated or missing keys are rejected with the block name") {
  const std::string text = read_file(testing::fixture_params());
  const auto pos = text.find("\"female\": -0.233");
  REQUIRE(pos != std::string::npos);
  std::string mutated = text;
  mutated.replace(pos, 8, "\"femal\"");
  try {
    params_from_text(mutated);
    FAIL("mutated key accepted");
  } catch (const InvalidInput& e) {
    CHECK(std::string(e.what()).find("kappa_m") != std::string::npos);
  }
  CHECK_THROWS_AS(params_from_text("{}"), InvalidInput);
  CHECK_THROWS_AS(params_from_text("not json"), InvalidInput);
}

TEST_CASE("flatten and unflatten round trip") {
  ParameterFile pf = load_params(testing::fixture_params());
  Eigen::VectorXd v = pf.income.flatten();
  IncomeParams copy = IncomeParams::zeros(4, 3);
  copy.unflatten(v);
  CHECK(copy.flatten() == v);
  CHECK(coefficient_distance(v, v) == 0.0);
  MobilityParams bad = pf.mobility;
  bad.kappa_m(0, 0) = 1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
}
