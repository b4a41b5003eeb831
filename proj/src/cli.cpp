#include "moder/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <ostream>
#include <sstream>

namespace moder {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string opt_fixed(const std::optional<double>& v) { return v ? fixed(*v) : "n/a"; }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string matrix_markdown(const AccuracyMatrix& a) {
  std::ostringstream os;
  os << "| after task |";
  for (int i = 0; i < a.tasks(); ++i) os << " task " << i << " |";
  os << "\n|---|";
  for (int i = 0; i < a.tasks(); ++i) os << "---:|";
  os << '\n';
  for (int t = 0; t < a.tasks(); ++t) {
    os << "| " << t << " |";
    for (int i = 0; i < a.tasks(); ++i) os << ' ' << fixed(a(t, i), 3) << " |";
    os << '\n';
  }
  return os.str();
}

std::string run_report(const PipelineResult& r, const std::string& hash) {
  const bool mtil = r.report.protocol == "mtil";
  std::ostringstream os;
  os << "# Run " << hash << "\n\n";
  os << "Protocol: " << (mtil ? "MTIL" : "class-incremental") << ", " << r.accuracy.tasks() << " tasks, seed "
     << r.report.seeds.front() << ".\n\n";
  if (mtil) {
    os << "| method | Transfer | Avg | Last |\n|---|---:|---:|---:|\n";
    for (const auto& [name, m] : {std::pair<const char*, const MetricsReport*>{"MoDER", &r.report},
                                  std::pair<const char*, const MetricsReport*>{"zero-shot", &r.zero_shot_report}})
      os << "| " << name << " | " << opt_fixed(m->transfer) << " | " << opt_fixed(m->avg) << " | " << opt_fixed(m->last)
         << " |\n";
  } else {
    os << "| method | FAA | CI-Transfer |\n|---|---:|---:|\n";
    for (const auto& [name, m] : {std::pair<const char*, const MetricsReport*>{"MoDER", &r.report},
                                  std::pair<const char*, const MetricsReport*>{"zero-shot", &r.zero_shot_report}})
      os << "| " << name << " | " << opt_fixed(m->faa) << " | " << opt_fixed(m->ci_transfer) << " |\n";
  }
  os << "\n## Accuracy matrix\n\nRow t is the model after task t; entries above the diagonal are unseen tasks.\n\n";
  os << matrix_markdown(r.accuracy);
  os << "\n## Zero-shot accuracy matrix\n\n" << matrix_markdown(r.zero_shot);
  return os.str();
}

}  // namespace

int exit_code_for(const Error& e) {
  switch (e.category()) {
    case ErrorCategory::Io:
    case ErrorCategory::Format:
      return kExitIo;
    case ErrorCategory::Divergence:
      return kExitDivergence;
    default:
      return kExitConfig;
  }
}

RunConfig resolve_config(const ConfigSources& sources) {
  json j = sources.file ? read_config_file(*sources.file) : json::object();
  if (!j.is_object()) throw ConfigError("config root must be an object");
  if (const auto seed = seed_from_env()) j["seed"] = *seed;
  for (const auto& o : sources.overrides) apply_override(j, o);
  if (sources.output_dir) j["output_dir"] = *sources.output_dir;
  if (sources.threads) j["threads"] = *sources.threads;
  if (sources.mtil_transfer_inclusive) j["metrics"]["mtil_transfer_inclusive"] = *sources.mtil_transfer_inclusive;
  return run_config_from_json(j);
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out << contents;
    out.flush();
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move '" + tmp.string() + "' into place");
  }
}

void cmd_gen_world(const RunConfig& cfg, const fs::path& out) {
  const Scenario sc = make_scenario(cfg.pipeline);
  json j;
  j["config_hash"] = hash_hex(config_hash(cfg));
  j["world"] = to_json(sc.world);
  j["stream"]["protocol"] = sc.stream.protocol == StreamProtocol::Mtil ? "mtil" : "class_il";
  j["stream"]["train_per_class"] = sc.stream.train_per_class;
  j["stream"]["test_per_class"] = sc.stream.test_per_class;
  auto& tasks = j["stream"]["tasks"] = json::array();
  for (const Task& t : sc.stream.tasks) tasks.push_back({{"task_id", t.task_id}, {"class_ids", t.class_ids}});
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_file_atomic(out, j.dump(2) + "\n");
}

json cmd_run(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  ensure_dir(out_dir / "logs");
  const std::string hash = hash_hex(config_hash(cfg));
  write_file_atomic(out_dir / "config.lock", canonical_dump(cfg));
  log << "run " << hash << ": training " << cfg.pipeline.stream.tasks << " tasks\n" << std::flush;

  RunLog run_log;
  PipelineResult r = run_pipeline(cfg.pipeline, nullptr, &run_log);
  r.report.config_hash = r.zero_shot_report.config_hash = hash;

  const fs::path hub_path = out_dir / "hub.modr";
  save(r.hub(), fs::path(hub_path.string() + ".tmp"));
  fs::rename(hub_path.string() + ".tmp", hub_path);
  write_file_atomic(out_dir / "accuracy.csv", r.accuracy.to_csv());
  write_file_atomic(out_dir / "logs" / "generator.csv", run_log.generator_csv);
  write_file_atomic(out_dir / "logs" / "experts.csv", run_log.experts_csv);

  json metrics = to_json(r.report);
  metrics["zero_shot"] = to_json(r.zero_shot_report);
  metrics["accuracy_matrix"] = json::array();
  for (int t = 0; t < r.accuracy.tasks(); ++t) {
    json row = json::array();
    for (int i = 0; i < r.accuracy.tasks(); ++i) row.push_back(r.accuracy(t, i));
    metrics["accuracy_matrix"].push_back(row);
  }
  metrics["generator_final_loss"] = r.run.generator_final_loss;
  metrics["dsyn_training_accuracy"] = r.run.dsyn_training_accuracy;
  auto& merges = metrics["merges"] = json::array();
  for (const auto& m : r.merges) merges.push_back(to_json(m));
  metrics["hub_fingerprint"] = hash_hex(r.hub().fingerprint());
  metrics["created_at"] = utc_timestamp();
  write_file_atomic(out_dir / "metrics.json", metrics.dump(2) + "\n");
  write_file_atomic(out_dir / "report.md", run_report(r, hash));

  if (r.report.protocol == "mtil")
    log << "Transfer " << opt_fixed(r.report.transfer) << " Avg " << opt_fixed(r.report.avg) << " Last "
        << opt_fixed(r.report.last) << " (zero-shot " << opt_fixed(r.zero_shot_report.transfer) << " / "
        << opt_fixed(r.zero_shot_report.avg) << " / " << opt_fixed(r.zero_shot_report.last) << ")\n";
  else
    log << "FAA " << opt_fixed(r.report.faa) << " CI-Transfer " << opt_fixed(r.report.ci_transfer) << " (zero-shot "
        << opt_fixed(r.zero_shot_report.faa) << " / " << opt_fixed(r.zero_shot_report.ci_transfer) << ")\n";
  log << "wrote " << out_dir.string() << '\n';
  return metrics;
}

AblationTable cmd_ablate(const RunConfig& cfg, AblationAxis axis, const std::vector<std::string>& values,
                         const fs::path& out_dir, std::ostream& log) {
  ensure_dir(out_dir);
  write_file_atomic(out_dir / "config.lock", canonical_dump(cfg));
  log << "ablating " << axis_name(axis) << " over " << values.size() << " values\n" << std::flush;
  AblationTable table = ablate(cfg, axis, values);
  const std::string md = table.to_markdown();
  write_file_atomic(out_dir / ("ablation_" + axis_name(axis) + ".md"), md);
  json j;
  j["axis"] = axis_name(axis);
  j["base_hash"] = table.base_hash;
  j["zero_shot"] = to_json(table.zero_shot);
  auto& rows = j["rows"] = json::array();
  for (const auto& row : table.rows) rows.push_back({{"value", row.value}, {"metrics", to_json(row.report)}});
  write_file_atomic(out_dir / ("ablation_" + axis_name(axis) + ".json"), j.dump(2) + "\n");
  log << md;
  return table;
}

void cmd_hub_inspect(const fs::path& hub_path, const RunConfig& cfg, std::ostream& out) {
  const auto bytes = read_bytes(hub_path);
  const HubFileInfo info = read_hub_info(bytes);
  out << "file:                " << hub_path.string() << " (" << bytes.size() << " bytes)\n";
  out << "format version:      " << info.version << '\n';
  out << "encoder fingerprint: " << hash_hex(info.encoder_fingerprint) << '\n';
  out << "hub seed:            " << info.hub_seed << '\n';
  out << "adapter:             " << (info.variant == AdapterVariant::Vera ? "vera" : "lora") << ", rank " << info.rank
      << '\n';
  out << "entries:             " << info.entries << '\n';
  const auto encoder = std::make_shared<const ReferenceEncoder>(cfg.pipeline.encoder);
  const FoundationalHub hub = deserialize(bytes, encoder);
  out << "\n  class  task  |tau|        name\n";
  for (const auto& e : hub.entries()) {
    double sq = 0.0;
    for (const auto& d : e.task_vector.deltas) sq += d.squaredNorm();
    char line[160];
    std::snprintf(line, sizeof line, "  %5d  %4d  %-11.6g %s\n", e.class_id, e.task_id, std::sqrt(sq), e.class_name.c_str());
    out << line;
  }
}

void cmd_hub_verify(const fs::path& hub_path, const RunConfig& cfg, std::ostream& out) {
  const auto bytes = read_bytes(hub_path);
  const auto encoder = std::make_shared<const ReferenceEncoder>(cfg.pipeline.encoder);
  const FoundationalHub hub = deserialize(bytes, encoder);
  out << "OK " << hub_path.string() << ": " << hub.size() << " entries, checksum valid, hub fingerprint "
      << hash_hex(hub.fingerprint()) << '\n';
}

json comparable_metrics(json metrics) {
  metrics.erase("created_at");
  return metrics;
}

}  // namespace moder
