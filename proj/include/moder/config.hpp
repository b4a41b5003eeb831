#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "moder/pipeline.hpp"

namespace moder {

/// Everything a run depends on, plus where it writes. `output_dir` and
/// `pipeline.threads` affect neither results nor the hash.
struct RunConfig {
  PipelineConfig pipeline;
  std::string output_dir = "moder-out";
};

/// Complete tree with every field present. Keys are sorted, so the text is
/// canonical.
nlohmann::json to_json(const RunConfig& cfg);

/// Fields missing from `j` keep their value from `base`. Unknown keys, wrong
/// types and out-of-range values throw ConfigError naming the field.
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base = {});

/// Parses JSON that may contain // and /* */ comments. Syntax errors throw
/// ConfigError with line and column.
nlohmann::json parse_config_text(const std::string& text, const std::string& origin = "config");

/// Reads and parses a config file; IoError when it cannot be opened.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Applies "dotted.path=value". The value is parsed as JSON when possible and
/// taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads MODER_SEED; ConfigError when it is set but not an unsigned integer.
std::optional<std::uint64_t> seed_from_env();

/// Canonical text: sorted keys, two-space indent, trailing newline.
std::string canonical_dump(const RunConfig& cfg);

/// FNV-1a over the canonical text of the result-defining fields.
std::uint64_t config_hash(const RunConfig& cfg);
std::string hash_hex(std::uint64_t h);

}  // namespace moder
