#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "labdyn/diagnostics.hpp"
#include "labdyn/em.hpp"
#include "labdyn/lifetime.hpp"
#include "labdyn/panel_io.hpp"
#include "labdyn/parallel.hpp"
#include "labdyn/params_io.hpp"
#include "labdyn/simulate.hpp"

#ifndef LABDYN_VERSION
#define LABDYN_VERSION "0.0.0"
#endif

namespace labdyn::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Config files and manifests: a JSON object of flag values, either at the top
// level or under "flags". Values apply to the subcommand being run.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App* app) : app_(app) {}

  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
    }
    const auto subs = app_->get_subcommands();
    if (subs.empty()) throw CLI::ConversionError("--config needs a subcommand");
    const std::string sub = subs.front()->get_name();
    if (j.is_object() && j.contains("subcommand") && j["subcommand"] != sub)
      throw CLI::ConversionError("config was written for " + j["subcommand"].dump() + ", not " + sub);
    if (j.is_object() && j.contains("flags")) j = j["flags"];
    if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object of flag values");
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      item.parents = {sub};
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  const CLI::App* app_;
};

// Bound values of every registered flag, for the manifest.
struct Flags {
  std::vector<std::pair<std::string, std::function<ordered_json()>>> values;

  template <typename T>
  CLI::Option* option(CLI::App* app, const std::string& name, T& var, const std::string& help) {
    values.emplace_back(name, [&var] { return ordered_json(var); });
    return app->add_option("--" + name, var, help)->capture_default_str();
  }
  CLI::Option* flag(CLI::App* app, const std::string& name, bool& var, const std::string& help) {
    values.emplace_back(name, [&var] { return ordered_json(var); });
    return app->add_flag("--" + name, var, help);
  }
  ordered_json to_json() const {
    ordered_json j = ordered_json::object();
    for (const auto& [k, f] : values) j[k] = f();
    return j;
  }
};

struct Common {
  std::uint64_t seed = 1;
  int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::string params;
  std::string out;
};

void add_common(CLI::App* app, Flags& flags, Common& c, bool params_required) {
  flags.option(app, "seed", c.seed, "Global seed");
  flags.option(app, "threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
  auto* p = flags.option(app, "params", c.params, "Parameter file");
  if (params_required) p->required();
  flags.option(app, "out", c.out, "Output directory")->required();
  app->fallthrough();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch;
  }
  return q + "\"";
}

std::string report_to_csv(const ValidationReport& r) {
  std::ostringstream os;
  os << "line,person_id,message\n";
  for (const auto& e : r.entries) os << e.line << ',' << csv_field(e.person_id) << ',' << csv_field(e.message) << '\n';
  return os.str();
}

ordered_json report_summary(const ValidationReport& r) {
  return {{"rows_read", r.rows_read},
          {"rows_rejected", r.rows_rejected},
          {"individuals_dropped", r.individuals_dropped},
          {"entries", r.entries.size()}};
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// One run: output directory, written files and the manifest.
class Run {
 public:
  Run(std::string subcommand, const Flags& flags, const Common& common)
      : subcommand_(std::move(subcommand)), flags_(flags), dir_(common.out), start_(std::chrono::steady_clock::now()) {
    set_num_threads(common.threads);
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }

  void write(const std::string& name, const std::string& contents) {
    write_file_atomic(dir_ / name, contents);
    outputs_.push_back(name);
  }

  ordered_json& extra() { return extra_; }

  void finish(int exit_code) {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    ordered_json m;
    m["format"] = "labdyn-manifest/1";
    m["subcommand"] = subcommand_;
    m["version"] = LABDYN_VERSION;
    m["flags"] = flags_.to_json();
    m["outputs"] = outputs_;
    m["wall_clock_seconds"] = wall;
    m["finished_unix"] = static_cast<long long>(std::time(nullptr));
    m["exit_code"] = exit_code;
    for (auto it = extra_.begin(); it != extra_.end(); ++it) m[it.key()] = it.value();
    write_file_atomic(dir_ / "manifest.json", m.dump(2) + "\n");
  }

 private:
  std::string subcommand_;
  const Flags& flags_;
  fs::path dir_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::string> outputs_;
  ordered_json extra_ = ordered_json::object();
};

Panel load_with_classes(const std::string& panel_path, const std::string& classes_path, ValidationReport* report) {
  LoadedPanel lp = load_panel(panel_path);
  if (!classes_path.empty()) attach_classes(lp.panel, read_file(classes_path));
  if (report) *report = lp.report;
  return std::move(lp.panel);
}

// ---- generate

struct GenerateArgs {
  Common common;
  std::string population;
  std::size_t n = 5000;
  int years = 8;
  std::string rho_mode = "correlation_consistent";
};

int cmd_generate(const GenerateArgs& a, const Flags& flags) {
  Run run("generate", flags, a.common);
  const ParameterFile pf = load_params(a.common.params);
  PopulationSpec pop;
  if (!a.population.empty()) pop = population_from_text(read_file(a.population));
  if (a.n == 0) throw InvalidInput("--n must be positive");
  if (a.years < 1) throw InvalidInput("--years must be >= 1");
  const Panel panel =
      generate_panel(pop, pf.mobility, pf.income, a.n, a.years, a.common.seed, rho_mode_from_string(a.rho_mode));
  run.write("panel.csv", panel_to_csv(panel));
  run.write("classes.csv", classes_to_csv(panel));
  run.extra()["individuals"] = panel.size();
  run.finish(kSuccess);
  return kSuccess;
}

// ---- prepare

struct PrepareArgs {
  Common common;
  std::string panel;
  int end_year = 0;
  int max_age = 60;
  double base_age = 25.0;
  double per_decade = 10.0;
};

int cmd_prepare(const PrepareArgs& a, const Flags& flags) {
  Run run("prepare", flags, a.common);
  ValidationReport report;
  Panel panel = load_with_classes(a.panel, "", &report);
  PrepareOptions po;
  po.end_year = a.end_year;
  po.max_age = a.max_age;
  po.ages = {a.base_age, a.per_decade};
  panel = prepare_panel(std::move(panel), po, &report);
  run.write("panel.csv", panel_to_csv(panel));
  run.write("report.csv", report_to_csv(report));
  run.extra()["report"] = report_summary(report);
  run.finish(kSuccess);
  return kSuccess;
}

// ---- estimate

struct EstimateArgs {
  Common common;
  std::string panel;
  int km = 4;
  int ky = 3;
  double tol = 1e-3;
  int max_iterations = 500;
  int restarts = 1;
};

std::string trace_to_csv(const EstimateResult& r) {
  std::ostringstream os;
  os << "phase,iteration,loglik,distance\n";
  for (const EmResult* e : {&r.mobility, &r.income, &r.joint})
    for (const auto& t : e->trace) os << t.phase << ',' << t.iteration << ',' << num(t.loglik) << ',' << num(t.distance) << '\n';
  return os.str();
}

std::string map_classes_csv(const Panel& panel, const JointPosterior& post) {
  std::ostringstream os;
  os << "person_id,km,ky,prob\n";
  for (std::size_t i = 0; i < panel.size(); ++i) {
    Eigen::Index best = 0;
    const double p = post.prob.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    os << panel[i].id << ',' << best / post.num_income << ',' << best % post.num_income << ',' << num(p) << '\n';
  }
  return os.str();
}

int cmd_estimate(const EstimateArgs& a, const Flags& flags) {
  Run run("estimate", flags, a.common);
  const Panel panel = load_panel(a.panel).panel;
  check_prepared(panel);
  if (panel.empty()) throw InvalidInput("panel has no individuals");

  ModelConfig config;
  config.num_mobility_classes = a.km;
  config.num_income_classes = a.ky;
  config.em_tol = a.tol;
  config.em_max_iterations = a.max_iterations;
  config.validate();
  EmOptions options;
  options.tol = a.tol;
  options.max_iterations = a.max_iterations;
  options.restarts = a.restarts;
  options.seed = a.common.seed;
  if (a.restarts < 1) throw InvalidInput("--restarts must be >= 1");

  EstimateResult res;
  if (!a.common.params.empty()) {
    // start from the given parameters
    const ParameterFile start = load_params(a.common.params);
    if (start.mobility.num_classes() != a.km || start.income.num_classes() != a.ky)
      throw InvalidInput("start parameters do not match --km/--ky");
    res.mobility = run_em_mobility(panel, start.mobility, options);
    res.income = run_em_income(panel, res.mobility.mobility, start.income, options);
    res.joint = run_em_joint(panel, res.mobility.mobility, res.income.income, options);
  } else {
    res = estimate(panel, config, options);
  }

  ParameterFile out;
  out.config = config;
  out.mobility = res.joint.mobility;
  out.income = res.joint.income;
  run.write("params.json", to_text(out));
  run.write("trace.csv", trace_to_csv(res));
  run.write("classes.csv", map_classes_csv(panel, e_step_joint(panel, out.mobility, out.income)));

  ordered_json conv;
  for (const EmResult* e : {&res.mobility, &res.income, &res.joint}) {
    const std::string phase = e->trace.empty() ? "unknown" : e->trace.front().phase;
    conv[phase] = {{"converged", e->converged}, {"iterations", e->iterations}, {"loglik", e->loglik},
                   {"notes", e->notes}};
  }
  run.extra()["convergence"] = conv;
  run.extra()["converged"] = res.converged();
  const int code = res.converged() ? kSuccess : kNotConverged;
  run.finish(code);
  if (code != kSuccess) std::cerr << "not converged: EM stopped at the iteration cap; see manifest.json\n";
  return code;
}

// ---- predict

struct PredictArgs {
  Common common;
  std::string panel;
  bool in_sample = false;
  int horizon = 0;
  std::string rho_mode = "correlation_consistent";
};

int cmd_predict(const PredictArgs& a, const Flags& flags) {
  Run run("predict", flags, a.common);
  const Panel observed = load_panel(a.panel).panel;
  const ParameterFile pf = load_params(a.common.params);
  PredictOptions po;
  po.in_sample = a.in_sample;
  if (a.horizon < 0) throw InvalidInput("--horizon must be >= 0");
  if (a.horizon > 0) po.horizon = a.horizon;
  po.rho_mode = rho_mode_from_string(a.rho_mode);
  const PredictResult pr = predict_panel(observed, pf.mobility, pf.income, a.common.seed, po);
  run.write("panel.csv", panel_to_csv(pr.panel));
  run.write("classes.csv", classes_to_csv(pr.panel));
  run.write("report.csv", report_to_csv(pr.report));
  run.extra()["distance_to_observed"] = matrix_distance(transition_matrix(observed), transition_matrix(pr.panel));
  run.finish(kSuccess);
  return kSuccess;
}

// ---- lifetime

struct LifetimeArgs {
  Common common;
  std::string panel;
  double beta = 0.95;
  std::vector<std::string> rr{"0.4"};
  std::string rho_mode = "correlation_consistent";
  double base_age = 25.0;
  double per_decade = 10.0;
  int retirement_age = 60;
  int horizon_years = 22;
  std::string classes = "prior";
};

ReplacementRate parse_rr(const std::string& s) {
  if (s == "sector") return {0.75, 0.71};
  const auto slash = s.find('/');
  try {
    std::size_t used = 0;
    if (slash != std::string::npos) {
      const double pub = std::stod(s.substr(0, slash), &used);
      if (used != slash) throw InvalidInput("");
      const std::string rest = s.substr(slash + 1);
      const double pvt = std::stod(rest, &used);
      if (used != rest.size()) throw InvalidInput("");
      return {pub, pvt};
    }
    const double v = std::stod(s, &used);
    if (used != s.size()) throw InvalidInput("");
    return ReplacementRate::common(v);
  } catch (const std::exception&) {
    throw InvalidInput("bad --rr value '" + s + "' (number, pub/pvt pair or 'sector')");
  }
}

std::string file_tag(std::string s) {
  for (char& ch : s)
    if (ch == '/') ch = '-';
  return s;
}

int cmd_lifetime(const LifetimeArgs& a, const Flags& flags) {
  Run run("lifetime", flags, a.common);
  const Panel panel = load_panel(a.panel).panel;
  const ParameterFile pf = load_params(a.common.params);
  ordered_json files = ordered_json::array();
  for (const auto& rr_text : a.rr) {
    LifetimeOptions lo;
    lo.beta = a.beta;
    lo.rr = parse_rr(rr_text);
    lo.horizon_years = a.horizon_years;
    lo.retirement_age = a.retirement_age;
    lo.ages = {a.base_age, a.per_decade};
    lo.rho_mode = rho_mode_from_string(a.rho_mode);
    lo.seed = a.common.seed;
    lo.classes = class_source_from_string(a.classes);
    lo.validate();
    const Counterfactuals cf = run_counterfactuals(panel, pf.mobility, pf.income, lo);
    const std::string tag = "rr-" + file_tag(rr_label(lo.rr));
    for (const auto& c : cf.curves) {
      const std::string name = "curve__" + file_tag(c.name) + "__" + tag + ".csv";
      run.write(name, curves_to_csv({c}, lo));
      files.push_back(name);
    }
    std::vector<LifetimeResult> all = cf.jfl_public;
    all.insert(all.end(), cf.jfl_private.begin(), cf.jfl_private.end());
    all.insert(all.end(), cf.mobility.begin(), cf.mobility.end());
    run.write("values__" + tag + ".csv", results_to_csv(all));
  }
  run.extra()["curve_files"] = files;
  run.finish(kSuccess);
  return kSuccess;
}

// ---- diagnose

struct DiagnoseArgs {
  Common common;
  std::string panel;
  std::string classes;
  std::string compare;
  std::string compare_classes;
  double bin_width = kDefaultBinWidth;
};

int cmd_diagnose(const DiagnoseArgs& a, const Flags& flags) {
  Run run("diagnose", flags, a.common);
  const Panel pa = load_with_classes(a.panel, a.classes, nullptr);
  if (!(a.bin_width > 0.0)) throw InvalidInput("--bin-width must be positive");
  if (!a.compare.empty()) {
    const Panel pb = load_with_classes(a.compare, a.compare_classes, nullptr);
    run.write("compare_report.txt", compare_report(pa, pb, a.bin_width));
    run.extra()["aggregate_distance"] = matrix_distance(transition_matrix(pa), transition_matrix(pb));
    run.finish(kSuccess);
    return kSuccess;
  }
  std::string trans = to_csv(transition_matrix(pa), "aggregate");
  const auto men = [](const IndividualHistory& h) { return !h.zf.female; };
  const auto women = [](const IndividualHistory& h) { return h.zf.female; };
  auto body = [](const std::string& csv) { return csv.substr(csv.find('\n') + 1); };
  trans += body(to_csv(transition_matrix(pa, men), "men"));
  trans += body(to_csv(transition_matrix(pa, women), "women"));
  if (!a.common.params.empty()) {
    const ParameterFile pf = load_params(a.common.params);
    const auto implied = implied_transition_matrix(pa, pf.mobility);
    trans += body(to_csv(implied, "implied"));
    run.extra()["implied_distance"] = matrix_distance(implied, transition_matrix(pa));
  }
  run.write("transitions.csv", trans);
  std::vector<Histogram> hs;
  std::vector<HistogramGroup> groups = {HistogramGroup::All, HistogramGroup::State, HistogramGroup::Sector,
                                        HistogramGroup::Gender};
  const bool classes = !a.classes.empty();
  if (classes) groups.push_back(HistogramGroup::IncomeClass);
  for (auto g : groups) {
    auto part = wage_histogram(pa, a.bin_width, g);
    hs.insert(hs.end(), part.begin(), part.end());
  }
  run.write("histograms.csv", to_csv(hs));
  if (classes) {
    run.write("composition.csv", to_csv(composition_table(pa, ClassKind::Mobility)) +
                                     body(to_csv(composition_table(pa, ClassKind::Income))));
  }
  run.finish(kSuccess);
  return kSuccess;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Latent-class labour-market dynamics: simulation, estimation and lifetime values"};
  app.require_subcommand(1);
  app.set_version_flag("--version", LABDYN_VERSION);
  app.set_config("--config", "", "JSON file of flag values, or a manifest to rerun (command-line flags win)");
  app.config_formatter(std::make_shared<JsonConfig>(&app));
  app.allow_config_extras(CLI::config_extras_mode::error);

  Flags fg, fp, fe, fr, fl, fd;

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Simulate a synthetic panel");
  add_common(gen, fg, ga.common, true);
  fg.option(gen, "population", ga.population, "Population spec file (key = value)");
  fg.option(gen, "n", ga.n, "Individuals");
  fg.option(gen, "years", ga.years, "Years per individual");
  fg.option(gen, "rho-mode", ga.rho_mode, "correlation_consistent or paper_formula");

  PrepareArgs pa;
  auto* prep = app.add_subcommand("prepare", "Impute, rebuild experience and winsorize a panel");
  add_common(prep, fp, pa.common, false);
  fp.option(prep, "panel", pa.panel, "Panel CSV")->required();
  fp.option(prep, "end-year", pa.end_year, "Panel end year (0: latest in the data)");
  fp.option(prep, "max-age", pa.max_age, "Trailing imputation only below this age");
  fp.option(prep, "base-age", pa.base_age, "Entry age at zero experience");
  fp.option(prep, "per-decade", pa.per_decade, "Years of age per decade of experience");

  EstimateArgs ea;
  auto* est = app.add_subcommand("estimate", "Sequential EM (mobility, income, joint)");
  add_common(est, fe, ea.common, false);
  fe.option(est, "panel", ea.panel, "Prepared panel CSV")->required();
  fe.option(est, "km", ea.km, "Mobility classes");
  fe.option(est, "ky", ea.ky, "Income classes");
  fe.option(est, "tol", ea.tol, "Coefficient-distance tolerance");
  fe.option(est, "max-iter", ea.max_iterations, "Iteration cap per phase");
  fe.option(est, "restarts", ea.restarts, "Random starts for the mobility phase");

  PredictArgs ra;
  auto* pred = app.add_subcommand("predict", "Simulate forward from each individual's first spell");
  add_common(pred, fr, ra.common, true);
  fr.option(pred, "panel", ra.panel, "Observed panel CSV")->required();
  fr.flag(pred, "in-sample", ra.in_sample, "Draw the first state and wage from the model");
  fr.option(pred, "horizon", ra.horizon, "Years after the first (0: observed span)");
  fr.option(pred, "rho-mode", ra.rho_mode, "correlation_consistent or paper_formula");

  LifetimeArgs la;
  auto* life = app.add_subcommand("lifetime", "Job-for-life and with-mobility counterfactuals");
  add_common(life, fl, la.common, true);
  fl.option(life, "panel", la.panel, "Panel CSV (first spells are used)")->required();
  fl.option(life, "beta", la.beta, "Discount factor");
  fl.option(life, "rr", la.rr, "Replacement rates: number, pub/pvt, or 'sector' (0.75/0.71)");
  fl.option(life, "rho-mode", la.rho_mode, "correlation_consistent or paper_formula");
  fl.option(life, "base-age", la.base_age, "Entry age at zero experience");
  fl.option(life, "per-decade", la.per_decade, "Years of age per decade of experience");
  fl.option(life, "retirement-age", la.retirement_age, "Retirement age");
  fl.option(life, "horizon-years", la.horizon_years, "Years of retirement income");
  fl.option(life, "classes", la.classes, "Class draws: prior (given zf) or posterior (given the history)");

  DiagnoseArgs da;
  auto* diag = app.add_subcommand("diagnose", "Fit tables, or a comparison of two panels");
  add_common(diag, fd, da.common, false);
  fd.option(diag, "panel", da.panel, "Panel CSV")->required();
  fd.option(diag, "classes", da.classes, "Class sidecar for --panel");
  fd.option(diag, "compare", da.compare, "Second panel: write a comparison report");
  fd.option(diag, "compare-classes", da.compare_classes, "Class sidecar for --compare");
  fd.option(diag, "bin-width", da.bin_width, "Histogram bin width (log wage)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kValidationError;
  }

  try {
    if (gen->parsed()) return cmd_generate(ga, fg);
    if (prep->parsed()) return cmd_prepare(pa, fp);
    if (est->parsed()) return cmd_estimate(ea, fe);
    if (pred->parsed()) return cmd_predict(ra, fr);
    if (life->parsed()) return cmd_lifetime(la, fl);
    if (diag->parsed()) return cmd_diagnose(da, fd);
  } catch (const InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kValidationError;
  } catch (const IoError& e) {
    std::cerr << "i/o failure: " << e.what() << '\n';
    return kIoFailure;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o failure: " << e.what() << '\n';
    return kIoFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternalError;
  }
  return kInternalError;
}

}  // namespace labdyn::cli
