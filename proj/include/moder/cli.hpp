#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moder/ablation.hpp"
#include "moder/config.hpp"

namespace moder {

/// Process exit codes.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitIo = 2, kExitDivergence = 3, kExitInternal = 4 };

/// Config and contract violations map to 1, io and format problems to 2,
/// divergence to 3.
int exit_code_for(const Error& e);

/// How a command builds its RunConfig: defaults, then the file, then
/// MODER_SEED, then `--set` overrides, then dedicated flags.
struct ConfigSources {
  std::optional<std::filesystem::path> file;
  std::vector<std::string> overrides;
  std::optional<std::string> output_dir;
  std::optional<int> threads;
  std::optional<bool> mtil_transfer_inclusive;
};
RunConfig resolve_config(const ConfigSources& sources);

/// Writes {config_hash, world, stream} as JSON.
void cmd_gen_world(const RunConfig& cfg, const std::filesystem::path& out);

/// Trains and evaluates, writing out_dir/{config.lock, hub.modr,
/// accuracy.csv, metrics.json, report.md, logs/}. Returns the metrics JSON.
nlohmann::json cmd_run(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);

/// Writes out_dir/{config.lock, ablation_<axis>.md, ablation_<axis>.json}.
AblationTable cmd_ablate(const RunConfig& cfg, AblationAxis axis, const std::vector<std::string>& values,
                         const std::filesystem::path& out_dir, std::ostream& log);

/// Header and entry listing. Entries need the encoder the hub was built with.
void cmd_hub_inspect(const std::filesystem::path& hub_path, const RunConfig& cfg, std::ostream& out);

/// Full structural check; throws FormatError or IoError on failure.
void cmd_hub_verify(const std::filesystem::path& hub_path, const RunConfig& cfg, std::ostream& out);

/// metrics.json without fields that legitimately differ between identical runs.
nlohmann::json comparable_metrics(nlohmann::json metrics);

/// Writes via a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace moder
