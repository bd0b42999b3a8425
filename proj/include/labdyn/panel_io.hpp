#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "labdyn/types.hpp"

namespace labdyn {

/// Exact header of the canonical panel CSV.
inline constexpr const char* kPanelHeader = "person_id,year,state,log_wage,female,educ,first_xp";
/// Sidecar file with the latent classes of simulated panels.
inline constexpr const char* kClassHeader = "person_id,km,ky";

struct ReportEntry {
  std::size_t line = 0;  // 0 when not tied to an input line
  std::string person_id;
  std::string message;
};

struct ValidationReport {
  std::size_t rows_read = 0;
  std::size_t rows_rejected = 0;
  std::size_t individuals_dropped = 0;
  std::vector<ReportEntry> entries;

  void note(std::size_t line, std::string person, std::string message) {
    entries.push_back({line, std::move(person), std::move(message)});
  }
};

struct LoadedPanel {
  Panel panel;
  ValidationReport report;
};

/// Minimum number of observed person-years kept per individual.
inline constexpr std::size_t kMinSpells = 3;
/// Share of malformed rows above which loading aborts.
inline constexpr double kMaxMalformedShare = 0.01;

/// Reconstructs age from the first observation: base + per_decade * first_xp + years since.
struct EntryAgeRule {
  double base_age = 25.0;
  double per_decade = 10.0;

  double age_at_first(const FixedCovariates& zf) const noexcept { return base_age + per_decade * zf.first_xp; }
};

LoadedPanel parse_panel(const std::string& csv_text);
LoadedPanel load_panel(const std::filesystem::path& path);

std::string panel_to_csv(const Panel& panel);
void save_panel(const Panel& panel, const std::filesystem::path& path);

std::string classes_to_csv(const Panel& panel);
/// Attaches km/ky from a class sidecar; unknown ids are rejected.
void attach_classes(Panel& panel, const std::string& csv_text);

/// Recomputes xp for every year: first_xp at the first year, +0.1 after each employed year.
void recompute_experience(IndividualHistory& h);
void recompute_experience(Panel& panel);

/// Fills interior year gaps with non-employment, and appends non-employment up to
/// end_year for individuals who disappear while younger than max_age at end_year.
Panel impute_nonemployment(Panel panel, int end_year, int max_age = 60, EntryAgeRule ages = {});

/// Per (state, year) cell, clamps wages to the nearest-rank 1st and 99th
/// percentiles. Cells with fewer than min_cell wages are left untouched.
Panel winsorize_wages(Panel panel, ValidationReport* report = nullptr, std::size_t min_cell = 100);

struct PrepareOptions {
  int end_year = 0;  // 0: latest year in the panel
  int max_age = 60;
  EntryAgeRule ages{};
};

/// Imputation, experience reconstruction and winsorization, in that order.
Panel prepare_panel(Panel panel, const PrepareOptions& options = {}, ValidationReport* report = nullptr);

/// Throws InvalidInput if any history breaks the prepared-panel invariants.
void check_prepared(const Panel& panel);

}  // namespace labdyn
