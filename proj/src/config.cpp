#include "moder/config.hpp"

#include <cstdlib>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

#include "moder/hash.hpp"

namespace moder {

using nlohmann::json;

namespace {

const char* protocol_name(StreamProtocol p) { return p == StreamProtocol::Mtil ? "mtil" : "class_il"; }
const char* loss_name(LossVariant v) { return v == LossVariant::CrossEntropy ? "cross_entropy" : "sigmoid"; }
const char* adapter_name(AdapterVariant v) { return v == AdapterVariant::Vera ? "vera" : "lora"; }

json result_fields(const PipelineConfig& p) {
  const EncoderConfig& e = p.encoder;
  const DiffusionConfig& d = p.diffusion;
  const TrainConfig& t = p.train;
  const ClassifyConfig& c = p.classify;
  json j;
  j["seed"] = p.seed;
  j["encoder"] = {{"vocab_size", e.vocab_size}, {"token_dim", e.token_dim},         {"hidden_dim", e.hidden_dim},
                  {"embed_dim", e.embed_dim},   {"layer_norm_eps", e.layer_norm_eps}, {"seed", e.seed}};
  j["world"] = {{"num_classes", p.world.num_classes},
                {"num_families", p.world.num_families},
                {"gamma", p.world.gamma},
                {"delta", p.world.delta},
                {"sigma", p.world.sigma}};
  j["stream"] = {{"protocol", protocol_name(p.stream.protocol)},
                 {"tasks", p.stream.tasks},
                 {"classes_per_task", p.stream.classes_per_task},
                 {"train_per_class", p.stream.train_per_class},
                 {"test_per_class", p.stream.test_per_class}};
  j["diffusion"] = {{"steps", d.steps},     {"beta_start", d.beta_start}, {"beta_end", d.beta_end},
                    {"scale_to_steps", d.scale_to_steps}, {"hidden", d.hidden}, {"layers", d.layers},
                    {"cond_dim", d.cond_dim}, {"time_dim", d.time_dim},   {"iterations", d.iterations},
                    {"batch", d.batch},     {"lr", d.lr},                 {"weight_decay", d.weight_decay}};
  j["replay"] = {{"per_class", p.synthetic_per_class},
                 {"sample_batch", p.synthetic_batch},
                 {"mix_real_features", p.mix_real_features}};
  j["train"] = {{"lr", t.lr},
                {"weight_decay", t.weight_decay},
                {"iterations", t.iterations},
                {"data_batch", t.data_batch},
                {"expert_batch", t.expert_batch},
                {"loss", loss_name(t.loss)},
                {"template_augmentation", t.template_augmentation},
                {"ce_temperature", t.ce_temperature},
                {"logit_scale", t.logit_scale},
                {"logit_bias", t.logit_bias},
                {"retrain_old", t.retrain_old},
                {"adapter", adapter_name(t.variant)},
                {"rank", t.rank}};
  j["templates"] = {{"count", p.template_count}, {"file", p.template_file}};
  j["forge"] = {{"k", c.forge.k},
                {"alpha", c.forge.alpha},
                {"temperature", c.forge.temperature},
                {"alpha_seen", c.alpha_seen},
                {"forge_unseen", c.forge_unseen}};
  j["metrics"] = {{"mtil_transfer_inclusive", p.mtil_transfer_inclusive}};
  return j;
}

/// Walks one JSON object, reading known keys and rejecting the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config field '" + (path_.empty() ? "<root>" : path_) + "': expected an object");
  }
  ~Section() = default;

  Section sub(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  void read(const std::string& key, int& out, int min) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < min) fail(key, "must be at least " + std::to_string(min));
    if (x > std::numeric_limits<int>::max()) fail(key, "must be at most " + std::to_string(std::numeric_limits<int>::max()));
    out = static_cast<int>(x);
  }
  void read(const std::string& key, std::uint64_t& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      fail(key, "expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  /// Reads a real in [lo, hi] (or (lo, hi] when `open_lo`).
  void read(const std::string& key, double& out, double lo, double hi, bool open_lo = false) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) fail(key, "expected a number");
    const double x = v.get<double>();
    if (!(open_lo ? x > lo : x >= lo) || !(x <= hi))
      fail(key, "must lie in " + std::string(open_lo ? "(" : "[") + num(lo) + ", " + num(hi) + "]");
    out = x;
  }
  void read(const std::string& key, bool& out) {
    if (!take(key)) return;
    if (!j_.at(key).is_boolean()) fail(key, "expected true or false");
    out = j_.at(key).get<bool>();
  }
  void read(const std::string& key, std::string& out) {
    if (!take(key)) return;
    if (!j_.at(key).is_string()) fail(key, "expected a string");
    out = j_.at(key).get<std::string>();
  }
  template <typename Enum>
  void read_enum(const std::string& key, Enum& out, std::initializer_list<std::pair<const char*, Enum>> choices) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    std::string names;
    for (const auto& [name, value] : choices) {
      if (v.is_string() && v.get<std::string>() == name) {
        out = value;
        return;
      }
      names += (names.empty() ? "" : ", ") + std::string(name);
    }
    fail(key, "expected one of: " + names);
  }

  /// Throws on keys that were never read.
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown config field '" + field(key) + "'");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& why) const {
    throw ConfigError("config field '" + field(key) + "': " + why);
  }

 private:
  bool take(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  static std::string num(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

json to_json(const RunConfig& cfg) {
  json j = result_fields(cfg.pipeline);
  j["output_dir"] = cfg.output_dir;
  j["threads"] = cfg.pipeline.threads;
  return j;
}

RunConfig run_config_from_json(const json& j, const RunConfig& base) {
  RunConfig cfg = base;
  PipelineConfig& p = cfg.pipeline;
  Section root(j, "");
  root.read("seed", p.seed);
  root.read("output_dir", cfg.output_dir);
  root.read("threads", p.threads, 1);

  Section enc = root.sub("encoder");
  enc.read("vocab_size", p.encoder.vocab_size, 1);
  enc.read("token_dim", p.encoder.token_dim, 1);
  enc.read("hidden_dim", p.encoder.hidden_dim, 1);
  enc.read("embed_dim", p.encoder.embed_dim, 1);
  enc.read("layer_norm_eps", p.encoder.layer_norm_eps, 0.0, 1.0, true);
  enc.read("seed", p.encoder.seed);
  enc.finish();

  Section world = root.sub("world");
  world.read("num_classes", p.world.num_classes, 1);
  world.read("num_families", p.world.num_families, 1);
  world.read("gamma", p.world.gamma, 0.0, kInf);
  world.read("delta", p.world.delta, 0.0, kInf);
  world.read("sigma", p.world.sigma, 0.0, kInf);
  world.finish();
  if (p.world.num_families > p.world.num_classes) world.fail("num_families", "cannot exceed num_classes");

  Section stream = root.sub("stream");
  stream.read_enum("protocol", p.stream.protocol, {{"class_il", StreamProtocol::ClassIL}, {"mtil", StreamProtocol::Mtil}});
  stream.read("tasks", p.stream.tasks, 1);
  stream.read("classes_per_task", p.stream.classes_per_task, 1);
  stream.read("train_per_class", p.stream.train_per_class, 1);
  stream.read("test_per_class", p.stream.test_per_class, 1);
  stream.finish();

  Section diff = root.sub("diffusion");
  DiffusionConfig& d = p.diffusion;
  diff.read("steps", d.steps, 1);
  diff.read("beta_start", d.beta_start, 0.0, 1.0, true);
  diff.read("beta_end", d.beta_end, 0.0, 1.0, true);
  diff.read("scale_to_steps", d.scale_to_steps);
  diff.read("hidden", d.hidden, 1);
  diff.read("layers", d.layers, 2);
  diff.read("cond_dim", d.cond_dim, 1);
  diff.read("time_dim", d.time_dim, 1);
  diff.read("iterations", d.iterations, 0);
  diff.read("batch", d.batch, 1);
  diff.read("lr", d.lr, 0.0, kInf, true);
  diff.read("weight_decay", d.weight_decay, 0.0, kInf);
  diff.finish();
  if (!(d.beta_start <= d.beta_end && d.beta_end < 1.0)) diff.fail("beta_end", "need beta_start <= beta_end < 1");
  try {
    (void)d.schedule();
  } catch (const ContractError& e) {
    diff.fail("steps", e.what());
  }

  Section replay = root.sub("replay");
  replay.read("per_class", p.synthetic_per_class, 1);
  replay.read("sample_batch", p.synthetic_batch, 1);
  replay.read("mix_real_features", p.mix_real_features);
  replay.finish();

  Section train = root.sub("train");
  TrainConfig& t = p.train;
  train.read("lr", t.lr, 0.0, kInf, true);
  train.read("weight_decay", t.weight_decay, 0.0, kInf);
  train.read("iterations", t.iterations, 0);
  train.read("data_batch", t.data_batch, 1);
  train.read("expert_batch", t.expert_batch, 0);
  train.read_enum("loss", t.loss, {{"sigmoid", LossVariant::Sigmoid}, {"cross_entropy", LossVariant::CrossEntropy}});
  train.read("template_augmentation", t.template_augmentation);
  train.read("ce_temperature", t.ce_temperature, 0.0, kInf, true);
  train.read("logit_scale", t.logit_scale, 0.0, kInf, true);
  train.read("logit_bias", t.logit_bias, -kInf, kInf);
  train.read("retrain_old", t.retrain_old);
  train.read_enum("adapter", t.variant, {{"lora", AdapterVariant::Lora}, {"vera", AdapterVariant::Vera}});
  train.read("rank", t.rank, 1);
  train.finish();

  Section templates = root.sub("templates");
  templates.read("count", p.template_count, 1);
  templates.read("file", p.template_file);
  templates.finish();

  Section forge = root.sub("forge");
  ClassifyConfig& c = p.classify;
  forge.read("k", c.forge.k, 1);
  forge.read("alpha", c.forge.alpha, 0.0, 1.0);
  forge.read("temperature", c.forge.temperature, 0.0, kInf, true);
  forge.read("alpha_seen", c.alpha_seen, 0.0, 1.0);
  forge.read("forge_unseen", c.forge_unseen);
  forge.finish();

  Section metrics = root.sub("metrics");
  metrics.read("mtil_transfer_inclusive", p.mtil_transfer_inclusive);
  metrics.finish();

  root.finish();
  return cfg;
}

json parse_config_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text, nullptr, /*allow_exceptions=*/true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    // byte offsets are 1-based and point just past the offending character
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::string what = e.what();
    const auto detail = what.find("syntax error");
    if (detail != std::string::npos) what = what.substr(detail);
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + what);
  }
}

json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "': '" + key.substr(0, start) + "' is not a section");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

std::optional<std::uint64_t> seed_from_env() {
  const char* raw = std::getenv("MODER_SEED");
  if (raw == nullptr) return std::nullopt;
  const std::string s(raw);
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || s.size() > 20)
    throw ConfigError("MODER_SEED must be an unsigned integer, got '" + s + "'");
  try {
    return std::stoull(s);
  } catch (const std::out_of_range&) {
    throw ConfigError("MODER_SEED is out of range: '" + s + "'");
  }
}

std::string canonical_dump(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(result_fields(cfg.pipeline).dump()); }

std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace moder
