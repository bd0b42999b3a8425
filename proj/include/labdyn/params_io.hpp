#pragma once

#include <filesystem>
#include <string>

#include "labdyn/params.hpp"
#include "labdyn/types.hpp"

namespace labdyn {

inline constexpr const char* kParamsFormatTag = "labdyn-params/1";

/// A complete parameter set: both coefficient groups plus the run configuration.
struct ParameterFile {
  ModelConfig config;
  MobilityParams mobility;
  IncomeParams income;
};

/// Canonical text form (JSON, fixed key order, round-trip precision).
std::string to_text(const ParameterFile& pf);
/// Parses and validates; rejects unknown or missing keys and names the offending block.
ParameterFile params_from_text(const std::string& text);

ParameterFile load_params(const std::filesystem::path& path);
void save_params(const ParameterFile& pf, const std::filesystem::path& path);

/// Writes via a temporary file and rename so readers never see partial output.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace labdyn
