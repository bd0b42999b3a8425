#include "labdyn/panel_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "labdyn/params_io.hpp"

namespace labdyn {

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct ParsedRow {
  std::string id;
  int year = 0;
  EmploymentState state{};
  std::optional<double> wage;
  FixedCovariates zf;
};

// Returns an error message, or empty on success.
std::string parse_row(std::string_view line, ParsedRow& row) {
  const auto f = split_csv(line);
  if (f.size() != 7) return "expected 7 fields, found " + std::to_string(f.size());
  row.id = std::string(trim(f[0]));
  if (row.id.empty()) return "empty person_id";
  if (!parse_number(f[1], row.year)) return "bad year";
  int state = 0;
  if (!parse_number(f[2], state) || state < 0 || state >= kNumStates) return "bad state code";
  row.state = static_cast<EmploymentState>(state);
  const auto wage_field = trim(f[3]);
  if (wage_field.empty()) {
    row.wage.reset();
  } else {
    double w = 0.0;
    if (!parse_number(wage_field, w) || !std::isfinite(w)) return "bad log_wage";
    row.wage = w;
  }
  if (row.state == EmploymentState::NonEmployed && row.wage) return "log_wage present for state 0";
  if (row.state != EmploymentState::NonEmployed && !row.wage) return "log_wage missing for employed state";
  int female = 0;
  if (!parse_number(f[4], female) || (female != 0 && female != 1)) return "bad female flag";
  row.zf.female = female == 1;
  int educ = 0;
  if (!parse_number(f[5], educ) || educ < 0 || educ > 2) return "bad educ code";
  row.zf.educ = static_cast<Education>(educ);
  if (!parse_number(f[6], row.zf.first_xp) || !std::isfinite(row.zf.first_xp) || row.zf.first_xp < 0.0)
    return "bad first_xp";
  return {};
}

bool same_covariates(const FixedCovariates& a, const FixedCovariates& b) {
  return a.female == b.female && a.educ == b.educ && a.first_xp == b.first_xp;
}

}  // namespace

LoadedPanel parse_panel(const std::string& csv_text) {
  LoadedPanel out;
  auto& report = out.report;
  std::istringstream in(csv_text);
  std::string line;
  std::size_t lineno = 0;

  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    if (trim(line) != kPanelHeader)
      throw InvalidInput("panel header mismatch at line " + std::to_string(lineno) + ": expected '" + kPanelHeader +
                         "'");
    have_header = true;
    break;
  }
  if (!have_header) {
    report.note(0, "", "empty panel file");
    return out;
  }

  std::vector<std::string> order;
  std::unordered_map<std::string, IndividualHistory> people;
  std::set<std::pair<std::string, int>> seen;

  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    ++report.rows_read;
    ParsedRow row;
    std::string err = parse_row(line, row);
    if (err.empty() && !seen.insert({row.id, row.year}).second) err = "duplicate (person_id, year)";
    if (err.empty()) {
      auto [it, inserted] = people.try_emplace(row.id);
      auto& h = it->second;
      if (inserted) {
        order.push_back(row.id);
        h.id = row.id;
        h.zf = row.zf;
      } else if (!same_covariates(h.zf, row.zf)) {
        err = "fixed covariates differ across rows";
      }
      if (err.empty()) h.years.push_back({row.year, row.state, row.wage, {}});
    }
    if (!err.empty()) {
      ++report.rows_rejected;
      report.note(lineno, row.id, err);
    }
  }

  if (report.rows_read > 0 &&
      static_cast<double>(report.rows_rejected) > kMaxMalformedShare * static_cast<double>(report.rows_read))
    throw InvalidInput("panel rejected: " + std::to_string(report.rows_rejected) + " of " +
                       std::to_string(report.rows_read) + " rows malformed (first: line " +
                       std::to_string(report.entries.front().line) + ", " + report.entries.front().message + ")");

  for (const auto& id : order) {
    auto& h = people.at(id);
    std::sort(h.years.begin(), h.years.end(), [](const YearRecord& a, const YearRecord& b) { return a.year < b.year; });
    if (h.years.size() < kMinSpells) {
      ++report.individuals_dropped;
      report.note(0, id, "fewer than 3 observed spells");
      continue;
    }
    recompute_experience(h);
    out.panel.push_back(std::move(h));
  }
  return out;
}

LoadedPanel load_panel(const std::filesystem::path& path) { return parse_panel(read_file(path)); }

std::string panel_to_csv(const Panel& panel) {
  std::string s = std::string(kPanelHeader) + "\n";
  for (const auto& h : panel) {
    const std::string fixed = std::string(h.zf.female ? "1" : "0") + "," +
                              std::to_string(static_cast<int>(h.zf.educ)) + "," + format_double(h.zf.first_xp);
    for (const auto& y : h.years) {
      s += h.id;
      s += ',';
      s += std::to_string(y.year);
      s += ',';
      s += std::to_string(code(y.state));
      s += ',';
      if (y.log_wage) s += format_double(*y.log_wage);
      s += ',';
      s += fixed;
      s += '\n';
    }
  }
  return s;
}

void save_panel(const Panel& panel, const std::filesystem::path& path) { write_file_atomic(path, panel_to_csv(panel)); }

std::string classes_to_csv(const Panel& panel) {
  std::string s = std::string(kClassHeader) + "\n";
  for (const auto& h : panel) {
    if (!h.km || !h.ky) continue;
    s += h.id + "," + std::to_string(*h.km) + "," + std::to_string(*h.ky) + "\n";
  }
  return s;
}

void attach_classes(Panel& panel, const std::string& csv_text) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < panel.size(); ++i) index[panel[i].id] = i;
  std::istringstream in(csv_text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    if (lineno == 1) {
      if (trim(line) != kClassHeader) throw InvalidInput("class file header mismatch");
      continue;
    }
    const auto f = split_csv(line);
    int km = 0, ky = 0;
    if (f.size() != 3 || !parse_number(f[1], km) || !parse_number(f[2], ky))
      throw InvalidInput("malformed class row at line " + std::to_string(lineno));
    const auto it = index.find(std::string(trim(f[0])));
    if (it == index.end()) continue;  // individual dropped during loading
    panel[it->second].km = km;
    panel[it->second].ky = ky;
  }
}

void recompute_experience(IndividualHistory& h) {
  double xp = h.zf.first_xp;
  for (auto& y : h.years) {
    y.zv = TimeVaryingCovariates::at(xp);
    if (is_employed(y.state)) xp += kExperienceStep;
  }
}

void recompute_experience(Panel& panel) {
  for (auto& h : panel) recompute_experience(h);
}

Panel impute_nonemployment(Panel panel, int end_year, int max_age, EntryAgeRule ages) {
  for (auto& h : panel) {
    if (h.years.empty()) continue;
    std::vector<YearRecord> filled;
    filled.reserve(h.years.size());
    for (std::size_t t = 0; t < h.years.size(); ++t) {
      if (t > 0)
        for (int y = h.years[t - 1].year + 1; y < h.years[t].year; ++y)
          filled.push_back({y, EmploymentState::NonEmployed, std::nullopt, {}});
      filled.push_back(h.years[t]);
    }
    const int first_year = filled.front().year;
    const double age_at_end = ages.age_at_first(h.zf) + static_cast<double>(end_year - first_year);
    if (age_at_end < static_cast<double>(max_age))
      for (int y = filled.back().year + 1; y <= end_year; ++y)
        filled.push_back({y, EmploymentState::NonEmployed, std::nullopt, {}});
    h.years = std::move(filled);
    recompute_experience(h);
  }
  return panel;
}

Panel winsorize_wages(Panel panel, ValidationReport* report, std::size_t min_cell) {
  std::map<std::pair<int, int>, std::vector<double*>> cells;
  for (auto& h : panel)
    for (auto& y : h.years)
      if (y.log_wage) cells[{code(y.state), y.year}].push_back(&*y.log_wage);

  for (auto& [key, refs] : cells) {
    const std::size_t n = refs.size();
    if (n < min_cell) {
      if (report)
        report->note(0, "", "winsorization skipped for state " + std::to_string(key.first) + " year " +
                                std::to_string(key.second) + ": " + std::to_string(n) + " wages");
      continue;
    }
    std::vector<double> v;
    v.reserve(n);
    for (double* p : refs) v.push_back(*p);
    std::sort(v.begin(), v.end());
    // Nearest rank: the p-th percentile is the ceil(p/100 * n)-th order statistic.
    const auto rank = [n](double p) {
      const auto r = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
      return std::clamp<std::size_t>(r, 1, n) - 1;
    };
    const double lo = v[rank(1.0)];
    const double hi = v[rank(99.0)];
    for (double* p : refs) *p = std::clamp(*p, lo, hi);
  }
  return panel;
}

Panel prepare_panel(Panel panel, const PrepareOptions& options, ValidationReport* report) {
  int end_year = options.end_year;
  if (end_year == 0)
    for (const auto& h : panel)
      if (!h.years.empty()) end_year = std::max(end_year, h.years.back().year);
  panel = impute_nonemployment(std::move(panel), end_year, options.max_age, options.ages);
  return winsorize_wages(std::move(panel), report);
}

void check_prepared(const Panel& panel) {
  for (const auto& h : panel) {
    for (std::size_t t = 0; t < h.years.size(); ++t) {
      const auto& y = h.years[t];
      if (t > 0 && y.year != h.years[t - 1].year + 1)
        throw InvalidInput("person " + h.id + " has a year gap at " + std::to_string(y.year));
      if (is_employed(y.state) != y.log_wage.has_value())
        throw InvalidInput("person " + h.id + " breaks the wage/state rule in " + std::to_string(y.year));
      if (y.zv.xp_sq != y.zv.xp * y.zv.xp) throw InvalidInput("person " + h.id + " has inconsistent xp_sq");
    }
  }
}

}  // namespace labdyn
