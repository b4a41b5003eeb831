#include "moder/world.hpp"

#include <algorithm>
#include <array>
#include <numeric>

namespace moder {

namespace {

constexpr std::array<const char*, 12> kAdjectives = {"striped", "spotted", "golden", "arctic", "crested", "dusky",
                                                     "horned",  "painted", "marsh",  "alpine", "coral",   "velvet"};

constexpr std::array<const char*, 40> kNouns = {
    "fox",    "heron",  "beetle", "trout",   "lizard", "owl",     "moth",  "otter",  "finch",  "newt",
    "badger", "crab",   "hawk",   "salmon",  "gecko",  "wren",    "viper", "marten", "plover", "toad",
    "lynx",   "ibis",   "wasp",   "perch",   "skink",  "kestrel", "mink",  "snail",  "egret",  "frog",
    "hare",   "stork",  "hornet", "pike",    "iguana", "swift",   "stoat", "oyster", "crane",  "shrew"};

constexpr std::uint64_t kTagFamily = 0x46414dULL;
constexpr std::uint64_t kTagPrivate = 0x505256ULL;
constexpr std::uint64_t kTagSample = 0x534d504cULL;
constexpr std::uint64_t kTagStream = 0x5354524dULL;

Embedding random_unit(int dim, std::uint64_t seed) {
  SeededRng rng(seed);
  return l2_normalize(rng.normal_vector(dim));
}

std::string class_name(int class_id, int family) {
  std::string name = std::string(kAdjectives[static_cast<std::size_t>(family) % kAdjectives.size()]) + " " +
                     kNouns[static_cast<std::size_t>(class_id) % kNouns.size()];
  const auto round = static_cast<std::size_t>(class_id) / kNouns.size();
  if (round > 0) name += std::to_string(round + 1);
  return name;
}

}  // namespace

const WorldClass& SyntheticWorld::at(int class_id) const {
  if (class_id < 0 || class_id >= static_cast<int>(classes.size()))
    throw LookupError("SyntheticWorld: no class " + std::to_string(class_id));
  return classes[static_cast<std::size_t>(class_id)];
}

SyntheticWorld generate_world(const WorldConfig& cfg, const ReferenceEncoder& encoder, std::uint64_t seed) {
  if (cfg.num_classes < 1 || cfg.num_families < 1 || cfg.num_families > cfg.num_classes)
    throw ContractError("generate_world: need 1 <= families <= classes");
  if (cfg.gamma < 0.0 || cfg.delta < 0.0 || cfg.sigma < 0.0) throw ContractError("generate_world: negative scale");
  SyntheticWorld w;
  w.config = cfg;
  w.seed = seed;
  w.encoder_fingerprint = encoder.fingerprint();
  const int d = encoder.embed_dim();
  for (int f = 0; f < cfg.num_families; ++f)
    w.family_shifts.push_back(random_unit(d, derive_seed(seed, {kTagFamily, static_cast<std::uint64_t>(f)})));
  for (int c = 0; c < cfg.num_classes; ++c) {
    WorldClass wc;
    wc.class_id = c;
    wc.family = c % cfg.num_families;
    wc.name = class_name(c, wc.family);
    const Embedding text = encode_zero_shot(encoder, ClassPrompt{c, wc.name});
    const Embedding priv = random_unit(d, derive_seed(seed, {kTagPrivate, static_cast<std::uint64_t>(c)}));
    wc.mean = l2_normalize(text + cfg.gamma * w.family_shifts[static_cast<std::size_t>(wc.family)] + cfg.delta * priv);
    w.classes.push_back(std::move(wc));
  }
  return w;
}

std::vector<Embedding> sample_class(const SyntheticWorld& world, int class_id, int n, std::uint64_t seed) {
  if (n < 0) throw ContractError("sample_class: negative count");
  const Embedding& mean = world.at(class_id).mean;
  SeededRng rng(seed);
  std::vector<Embedding> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Vector u = rng.normal_vector(mean.size());
    u -= u.dot(mean) * mean;
    out.push_back(l2_normalize(mean + world.config.sigma * u));
  }
  return out;
}

std::vector<int> TaskStream::all_classes() const { return seen_through(static_cast<int>(tasks.size()) - 1); }

std::vector<int> TaskStream::seen_through(int t) const {
  std::vector<int> out;
  for (int k = 0; k <= t && k < static_cast<int>(tasks.size()); ++k)
    out.insert(out.end(), tasks[static_cast<std::size_t>(k)].class_ids.begin(), tasks[static_cast<std::size_t>(k)].class_ids.end());
  return out;
}

TaskStream make_stream(const SyntheticWorld& world, const StreamConfig& cfg, std::uint64_t seed) {
  if (cfg.tasks < 1) throw ContractError("make_stream: need at least one task");
  if (cfg.train_per_class < 1 || cfg.test_per_class < 1) throw ContractError("make_stream: sample counts must be positive");
  TaskStream s;
  s.protocol = cfg.protocol;
  s.train_per_class = cfg.train_per_class;
  s.test_per_class = cfg.test_per_class;
  const int roster = static_cast<int>(world.classes.size());
  if (cfg.protocol == StreamProtocol::ClassIL) {
    if (cfg.classes_per_task < 1) throw ContractError("make_stream: classes per task must be positive");
    if (cfg.tasks * cfg.classes_per_task > roster)
      throw ContractError("make_stream: stream needs " + std::to_string(cfg.tasks * cfg.classes_per_task) +
                          " classes but the world has " + std::to_string(roster));
    std::vector<int> order(static_cast<std::size_t>(roster));
    std::iota(order.begin(), order.end(), 0);
    SeededRng rng(derive_seed(seed, {kTagStream}));
    rng.shuffle(order);
    for (int t = 0; t < cfg.tasks; ++t) {
      Task task{t, {}};
      const auto first = order.begin() + static_cast<std::ptrdiff_t>(t) * cfg.classes_per_task;
      task.class_ids.assign(first, first + cfg.classes_per_task);
      std::sort(task.class_ids.begin(), task.class_ids.end());
      s.tasks.push_back(std::move(task));
    }
  } else {
    if (cfg.tasks > world.config.num_families)
      throw ContractError("make_stream: MTIL stream needs " + std::to_string(cfg.tasks) + " families but the world has " +
                          std::to_string(world.config.num_families));
    for (int t = 0; t < cfg.tasks; ++t) {
      Task task{t, {}};
      for (const auto& c : world.classes)
        if (c.family == t) task.class_ids.push_back(c.class_id);
      s.tasks.push_back(std::move(task));
    }
  }
  return s;
}

std::vector<TaskSplit> sample_split(const SyntheticWorld& world, const TaskStream& stream, std::uint64_t seed) {
  std::vector<TaskSplit> out;
  for (const Task& task : stream.tasks) {
    TaskSplit split;
    for (int c : task.class_ids) {
      const auto cid = static_cast<std::uint64_t>(c);
      for (auto& x : sample_class(world, c, stream.train_per_class, derive_seed(seed, {kTagSample, cid, 0})))
        split.train.push_back({std::move(x), c});
      for (auto& x : sample_class(world, c, stream.test_per_class, derive_seed(seed, {kTagSample, cid, 1})))
        split.test.push_back({std::move(x), c});
    }
    out.push_back(std::move(split));
  }
  return out;
}

nlohmann::json to_json(const SyntheticWorld& world) {
  nlohmann::json j;
  j["seed"] = world.seed;
  j["encoder_fingerprint"] = world.encoder_fingerprint;
  j["config"] = {{"num_classes", world.config.num_classes},
                 {"num_families", world.config.num_families},
                 {"gamma", world.config.gamma},
                 {"delta", world.config.delta},
                 {"sigma", world.config.sigma}};
  auto& classes = j["classes"] = nlohmann::json::array();
  for (const auto& c : world.classes)
    classes.push_back({{"id", c.class_id},
                       {"name", c.name},
                       {"family", c.family},
                       {"mean", std::vector<double>(c.mean.data(), c.mean.data() + c.mean.size())}});
  return j;
}

}  // namespace moder
