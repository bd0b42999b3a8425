#include "labdyn/params_io.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace labdyn {

using Json = nlohmann::ordered_json;

namespace {

Json row_to_json(const Layout& layout, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  Json j = Json::object();
  for (Eigen::Index c = 0; c < layout.size(); ++c) j[layout.names[c]] = row[c];
  return j;
}

void row_from_json(const Json& j, const Layout& layout, const std::string& block, Eigen::Ref<Eigen::RowVectorXd> out) {
  if (!j.is_object()) throw InvalidInput("block '" + block + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = std::find(layout.names.begin(), layout.names.end(), key);
    if (it == layout.names.end()) throw InvalidInput("block '" + block + "' has unknown key '" + key + "'");
    if (!value.is_number()) throw InvalidInput("block '" + block + "' key '" + key + "' is not a number");
  }
  if (static_cast<Eigen::Index>(j.size()) != layout.size())
    throw InvalidInput("block '" + block + "' has " + std::to_string(j.size()) + " entries, layout requires " +
                       std::to_string(layout.size()));
  for (Eigen::Index c = 0; c < layout.size(); ++c) out[c] = j.at(layout.names[c]).get<double>();
}

// Outcome rows 1..n-1 keyed by "<prefix><index>"; row 0 is the implicit zero base.
Json outcomes_to_json(const Layout& layout, const Eigen::MatrixXd& m, const std::string& prefix) {
  Json j = Json::object();
  for (Eigen::Index r = 1; r < m.rows(); ++r) j[prefix + std::to_string(r)] = row_to_json(layout, m.row(r));
  return j;
}

void outcomes_from_json(const Json& j, const Layout& layout, const std::string& block, const std::string& prefix,
                        Eigen::MatrixXd& m) {
  if (!j.is_object()) throw InvalidInput("block '" + block + "' must be an object");
  std::set<std::string> expected;
  for (Eigen::Index r = 1; r < m.rows(); ++r) expected.insert(prefix + std::to_string(r));
  for (const auto& [key, value] : j.items())
    if (!expected.count(key)) throw InvalidInput("block '" + block + "' has unknown outcome '" + key + "'");
  if (j.size() != expected.size()) throw InvalidInput("block '" + block + "' is missing outcome rows");
  m.row(0).setZero();
  for (Eigen::Index r = 1; r < m.rows(); ++r) {
    Eigen::RowVectorXd row(layout.size());
    row_from_json(j.at(prefix + std::to_string(r)), layout, block + "." + prefix + std::to_string(r), row);
    m.row(r) = row;
  }
}

void expect_keys(const Json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw InvalidInput("'" + where + "' must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw InvalidInput("'" + where + "' has unknown key '" + key + "'");
  for (const char* k : keys)
    if (!j.contains(k)) throw InvalidInput("'" + where + "' is missing key '" + std::string(k) + "'");
}

Json config_to_json(const ModelConfig& c) {
  Json j;
  j["num_mobility_classes"] = c.num_mobility_classes;
  j["num_income_classes"] = c.num_income_classes;
  j["beta"] = c.beta;
  j["replacement_rate_public"] = c.replacement_rate.pub;
  j["replacement_rate_private"] = c.replacement_rate.pvt;
  j["retirement_age"] = c.retirement_age;
  j["retirement_horizon_years"] = c.retirement_horizon_years;
  j["em_tol"] = c.em_tol;
  j["kernel_tol"] = c.kernel_tol;
  j["em_max_iterations"] = c.em_max_iterations;
  j["rho_mode"] = to_string(c.rho_mode);
  return j;
}

ModelConfig config_from_json(const Json& j) {
  expect_keys(j, "config",
              {"num_mobility_classes", "num_income_classes", "beta", "replacement_rate_public",
               "replacement_rate_private", "retirement_age", "retirement_horizon_years", "em_tol", "kernel_tol",
               "em_max_iterations", "rho_mode"});
  ModelConfig c;
  c.num_mobility_classes = j.at("num_mobility_classes").get<int>();
  c.num_income_classes = j.at("num_income_classes").get<int>();
  c.beta = j.at("beta").get<double>();
  c.replacement_rate.pub = j.at("replacement_rate_public").get<double>();
  c.replacement_rate.pvt = j.at("replacement_rate_private").get<double>();
  c.retirement_age = j.at("retirement_age").get<int>();
  c.retirement_horizon_years = j.at("retirement_horizon_years").get<int>();
  c.em_tol = j.at("em_tol").get<double>();
  c.kernel_tol = j.at("kernel_tol").get<double>();
  c.em_max_iterations = j.at("em_max_iterations").get<int>();
  c.rho_mode = rho_mode_from_string(j.at("rho_mode").get<std::string>());
  c.validate();
  return c;
}

}  // namespace

std::string to_text(const ParameterFile& pf) {
  pf.mobility.validate();
  pf.income.validate();
  const auto& dm = pf.mobility.designs();
  const auto& dy = pf.income.designs();

  Json j;
  j["format"] = kParamsFormatTag;
  j["config"] = config_to_json(pf.config);
  Json m;
  m["kappa_m"] = outcomes_to_json(dm.kappa_m(), pf.mobility.kappa_m, "class_");
  m["chi0"] = outcomes_to_json(dm.chi0(), pf.mobility.chi0, "state_");
  m["chi"] = outcomes_to_json(dm.chi(), pf.mobility.chi, "state_");
  j["mobility"] = m;
  Json y;
  y["kappa_y"] = outcomes_to_json(dy.kappa_y(), pf.income.kappa_y, "class_");
  y["mu"] = row_to_json(dy.mu(), pf.income.mu.transpose());
  y["sigma"] = row_to_json(dy.sigma(), pf.income.sigma.transpose());
  y["xi"] = row_to_json(dy.xi(), pf.income.xi.transpose());
  j["income"] = y;
  return j.dump(2) + "\n";
}

ParameterFile params_from_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("parameter file is not valid JSON: ") + e.what());
  }
  expect_keys(j, "parameter file", {"format", "config", "mobility", "income"});
  if (j.at("format") != kParamsFormatTag)
    throw InvalidInput("unsupported parameter format tag: " + j.at("format").dump());

  ParameterFile pf;
  try {
    pf.config = config_from_json(j.at("config"));
    const int km = pf.config.num_mobility_classes;
    const int ky = pf.config.num_income_classes;
    pf.mobility = MobilityParams::zeros(km);
    pf.income = IncomeParams::zeros(km, ky);
    const auto& dm = pf.mobility.designs();
    const auto& dy = pf.income.designs();

    const Json& m = j.at("mobility");
    expect_keys(m, "mobility", {"kappa_m", "chi0", "chi"});
    outcomes_from_json(m.at("kappa_m"), dm.kappa_m(), "kappa_m", "class_", pf.mobility.kappa_m);
    outcomes_from_json(m.at("chi0"), dm.chi0(), "chi0", "state_", pf.mobility.chi0);
    outcomes_from_json(m.at("chi"), dm.chi(), "chi", "state_", pf.mobility.chi);

    const Json& y = j.at("income");
    expect_keys(y, "income", {"kappa_y", "mu", "sigma", "xi"});
    outcomes_from_json(y.at("kappa_y"), dy.kappa_y(), "kappa_y", "class_", pf.income.kappa_y);
    Eigen::RowVectorXd row;
    row.resize(dy.mu().size());
    row_from_json(y.at("mu"), dy.mu(), "mu", row);
    pf.income.mu = row.transpose();
    row.resize(dy.sigma().size());
    row_from_json(y.at("sigma"), dy.sigma(), "sigma", row);
    pf.income.sigma = row.transpose();
    row.resize(dy.xi().size());
    row_from_json(y.at("xi"), dy.xi(), "xi", row);
    pf.income.xi = row.transpose();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed parameter file: ") + e.what());
  }
  pf.mobility.validate();
  pf.income.validate();
  return pf;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << contents;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

ParameterFile load_params(const std::filesystem::path& path) { return params_from_text(read_file(path)); }

void save_params(const ParameterFile& pf, const std::filesystem::path& path) { write_file_atomic(path, to_text(pf)); }

}  // namespace labdyn
