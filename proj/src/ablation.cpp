#include "moder/ablation.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <sstream>

namespace moder {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

double parse_real(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ConfigError("ablate: " + what + " value '" + s + "' is not a number");
  return v;
}

int parse_int(const std::string& s, const std::string& what) {
  const double v = parse_real(s, what);
  if (v != static_cast<int>(v)) throw ConfigError("ablate: " + what + " value '" + s + "' is not an integer");
  return static_cast<int>(v);
}

/// Sets the axis fields of `cfg` from `value`.
void apply_axis(PipelineConfig& cfg, AblationAxis axis, const std::string& value) {
  switch (axis) {
    case AblationAxis::Loss: {
      const std::string v = lower(value);
      if (v == "sigmoid") {
        cfg.train.loss = LossVariant::Sigmoid;
      } else if (v == "cross_entropy" || v == "ce") {
        cfg.train.loss = LossVariant::CrossEntropy;
        cfg.train.expert_batch = 0;
      } else {
        throw ConfigError("ablate: loss value '" + value + "' is not sigmoid or cross_entropy");
      }
      break;
    }
    case AblationAxis::Alpha: {
      const double a = parse_real(value, "alpha");
      if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("ablate: alpha value '" + value + "' is outside [0, 1]");
      cfg.classify.forge.alpha = a;
      cfg.classify.alpha_seen = a;
      break;
    }
    case AblationAxis::K: {
      const int k = parse_int(value, "k");
      if (k < 1) throw ConfigError("ablate: k value '" + value + "' must be at least 1");
      cfg.classify.forge.k = k;
      break;
    }
    case AblationAxis::TemplateAug: {
      const std::string v = lower(value);
      if (v == "on" || v == "true" || v == "1") {
        cfg.train.template_augmentation = true;
      } else if (v == "off" || v == "false" || v == "0") {
        cfg.train.template_augmentation = false;
      } else {
        throw ConfigError("ablate: template_aug value '" + value + "' is not on or off");
      }
      break;
    }
  }
}

/// Copies the axis fields of `from` into `to`.
void copy_axis(PipelineConfig& to, const PipelineConfig& from, AblationAxis axis) {
  switch (axis) {
    case AblationAxis::Loss:
      to.train.loss = from.train.loss;
      to.train.expert_batch = from.train.expert_batch;
      break;
    case AblationAxis::Alpha:
      to.classify.forge.alpha = from.classify.forge.alpha;
      to.classify.alpha_seen = from.classify.alpha_seen;
      break;
    case AblationAxis::K:
      to.classify.forge.k = from.classify.forge.k;
      break;
    case AblationAxis::TemplateAug:
      to.train.template_augmentation = from.train.template_augmentation;
      break;
  }
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

}  // namespace

AblationAxis parse_axis(const std::string& name) {
  const std::string n = lower(name);
  if (n == "loss") return AblationAxis::Loss;
  if (n == "alpha") return AblationAxis::Alpha;
  if (n == "k") return AblationAxis::K;
  if (n == "template_aug" || n == "template-aug") return AblationAxis::TemplateAug;
  throw ConfigError("unknown ablation axis '" + name + "' (expected loss, alpha, k or template_aug)");
}

std::string axis_name(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::Loss:
      return "loss";
    case AblationAxis::Alpha:
      return "alpha";
    case AblationAxis::K:
      return "k";
    case AblationAxis::TemplateAug:
      return "template_aug";
  }
  return "?";
}

RunConfig ablation_row_config(const RunConfig& base, AblationAxis axis, const std::string& value) {
  RunConfig cfg = base;
  apply_axis(cfg.pipeline, axis, value);
  return cfg;
}

AblationTable ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("ablate: no values given");
  AblationTable table;
  table.axis = axis;
  table.base_hash = hash_hex(config_hash(base));
  const PipelineConfig& bp = base.pipeline;
  const bool mtil = bp.stream.protocol == StreamProtocol::Mtil;

  std::vector<RunConfig> configs;
  for (const auto& v : values) {
    configs.push_back(ablation_row_config(base, axis, v));
    // Everything but the axis must match the base, seeds included.
    RunConfig shared = configs.back();
    copy_axis(shared.pipeline, bp, axis);
    if (config_hash(shared) != config_hash(base)) throw ContractError("ablate: row config differs from base off-axis");
  }

  const Scenario scenario = make_scenario(bp);
  table.zero_shot = make_report(evaluate_zero_shot(scenario), mtil, bp.mtil_transfer_inclusive);
  table.zero_shot.config_hash = table.base_hash;
  table.zero_shot.seeds = {bp.seed};
  table.protocol = table.zero_shot.protocol;

  const bool eval_only = axis == AblationAxis::Alpha || axis == AblationAxis::K;
  std::optional<TrainedRun> shared_run;
  ReplayCache cache;
  for (std::size_t r = 0; r < values.size(); ++r) {
    const PipelineConfig& pc = configs[r].pipeline;
    AccuracyMatrix a(1);
    if (eval_only) {
      if (!shared_run) shared_run = train_stream(bp, &cache);
      a = evaluate_stream(*shared_run, pc.classify, pc.threads);
    } else {
      a = evaluate_stream(train_stream(pc, &cache), pc.classify, pc.threads);
    }
    AblationRow row;
    row.value = values[r];
    row.report = make_report(a, mtil, pc.mtil_transfer_inclusive);
    row.config_hash = hash_hex(config_hash(configs[r]));
    row.report.config_hash = row.config_hash;
    row.report.seeds = {pc.seed};
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string AblationTable::to_markdown() const {
  const bool mtil = protocol == "mtil";
  std::vector<std::vector<std::string>> grid;
  if (mtil)
    grid.push_back({axis_name(axis), "Transfer", "Avg", "Last", "config"});
  else
    grid.push_back({axis_name(axis), "FAA", "CI-Transfer", "config"});
  auto add = [&](const std::string& label, const MetricsReport& r, const std::string& hash) {
    if (mtil)
      grid.push_back({label, cell(r.transfer), cell(r.avg), cell(r.last), hash});
    else
      grid.push_back({label, cell(r.faa), cell(r.ci_transfer), hash});
  };
  add("zero-shot", zero_shot, base_hash);
  for (const auto& row : rows) add(row.value, row.report, row.config_hash);

  std::vector<std::size_t> width(grid.front().size(), 0);
  for (const auto& line : grid)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& line) {
    os << '|';
    for (std::size_t c = 0; c < line.size(); ++c) {
      // Label left-aligned, numbers right-aligned.
      const std::string pad(width[c] - line[c].size(), ' ');
      os << ' ' << (c == 0 ? line[c] + pad : pad + line[c]) << " |";
    }
    os << '\n';
  };
  emit(grid.front());
  os << '|';
  for (std::size_t c = 0; c < width.size(); ++c) os << ' ' << (c == 0 ? ":" : "") << std::string(width[c] - 1, '-') << (c == 0 ? "" : ":") << " |";
  os << '\n';
  for (std::size_t i = 1; i < grid.size(); ++i) emit(grid[i]);
  os << "\nBase config " << base_hash << "; rows differ from it only in " << axis_name(axis) << ".\n";
  return os.str();
}

}  // namespace moder
