#include "moder/hub.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "moder/hash.hpp"

namespace moder {

static_assert(std::endian::native == std::endian::little, "hub serialization assumes a little-endian host");

FoundationalHub::FoundationalHub(std::shared_ptr<const ReferenceEncoder> encoder, std::uint64_t hub_seed)
    : encoder_(std::move(encoder)), hub_seed_(hub_seed) {
  if (!encoder_) throw ContractError("FoundationalHub: missing encoder");
}

void FoundationalHub::insert(int class_id, const std::string& class_name, AdapterModule adapter, int task_id) {
  if (contains(class_id)) throw ContractError("FoundationalHub: class " + std::to_string(class_id) + " already stored");
  if (class_name.empty()) throw ContractError("FoundationalHub: empty class name");
  if (!entries_.empty() && (entries_.front().adapter.variant != adapter.variant || entries_.front().adapter.rank != adapter.rank))
    throw ContractError("FoundationalHub: all experts must share variant and rank");
  HubEntry e;
  e.class_id = class_id;
  e.class_name = class_name;
  e.task_vector = materialize(adapter);
  e.adapter = std::move(adapter);
  e.adapter.class_id = class_id;
  e.zero_shot = encode_zero_shot(*encoder_, ClassPrompt{class_id, class_name});
  e.task_id = task_id;
  restore_entry(std::move(e));
}

void FoundationalHub::update_adapter(int class_id, AdapterModule adapter) {
  auto it = index_.find(class_id);
  if (it == index_.end()) throw LookupError("FoundationalHub: no class " + std::to_string(class_id));
  HubEntry& e = entries_[it->second];
  e.task_vector = materialize(adapter);
  e.adapter = std::move(adapter);
}

const HubEntry& FoundationalHub::entry(int class_id) const {
  auto it = index_.find(class_id);
  if (it == index_.end()) throw LookupError("FoundationalHub: no class " + std::to_string(class_id));
  return entries_[it->second];
}

void FoundationalHub::restore_entry(HubEntry entry) {
  if (contains(entry.class_id)) throw ContractError("FoundationalHub: class " + std::to_string(entry.class_id) + " already stored");
  index_.emplace(entry.class_id, entries_.size());
  entries_.push_back(std::move(entry));
}

std::uint64_t FoundationalHub::fingerprint() const {
  Fnv1a h;
  h.update(hub_seed_);
  for (const auto& e : entries_) {
    h.update(static_cast<std::uint64_t>(e.class_id));
    h.update(e.class_name);
    h.update(static_cast<std::uint64_t>(e.task_id));
    h.update(e.adapter.params.fingerprint());
    h.update_matrix(e.zero_shot);
  }
  return h.digest();
}

// ---------------------------------------------------------------------------
// Retrieval and forging

std::vector<Neighbor> top_k(const FoundationalHub& hub, const Embedding& query, int k) {
  if (k < 1) throw ContractError("top_k: K must be at least 1");
  if (hub.empty()) throw ContractError("top_k: empty hub");
  std::vector<Neighbor> all;
  all.reserve(hub.size());
  for (const auto& e : hub.entries()) all.push_back({e.class_id, cosine_sim(e.zero_shot, query)});
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.sim != b.sim ? a.sim > b.sim : a.class_id < b.class_id;
  });
  all.resize(n);
  return all;
}

std::vector<Neighbor> top_k(const FoundationalHub& hub, const ClassPrompt& unseen, int k) {
  return top_k(hub, encode_zero_shot(hub.encoder(), unseen), k);
}

nlohmann::json to_json(const MergeReport& r) {
  return nlohmann::json{{"class_name", r.class_name}, {"contributors", r.contributors}, {"sims", r.sims},
                        {"weights", r.weights},       {"alpha", r.alpha},               {"k", r.k}};
}

ForgedPrototype forge(const FoundationalHub& hub, const std::string& class_name, const ForgeConfig& cfg) {
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ContractError("forge: alpha must lie in [0, 1]");
  if (!(cfg.temperature > 0.0)) throw ContractError("forge: temperature must be positive");
  const ClassPrompt prompt{-1, class_name, cfg.unseen_template};
  const std::vector<Neighbor> neighbors = top_k(hub, prompt, cfg.k);

  Vector sims(static_cast<Eigen::Index>(neighbors.size()));
  for (std::size_t i = 0; i < neighbors.size(); ++i) sims(static_cast<Eigen::Index>(i)) = neighbors[i].sim;
  const Vector weights = softmax(Vector(sims / cfg.temperature));

  std::vector<WeightedTaskVector> terms;
  ForgedPrototype out;
  out.report.class_name = class_name;
  out.report.alpha = cfg.alpha;
  out.report.k = static_cast<int>(neighbors.size());
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    const double w = weights(static_cast<Eigen::Index>(i));
    terms.push_back({&hub.entry(neighbors[i].class_id).task_vector, w});
    out.report.contributors.push_back(neighbors[i].class_id);
    out.report.sims.push_back(neighbors[i].sim);
    out.report.weights.push_back(w);
  }
  out.merged = combine(terms);
  out.embedding = encode(hub.encoder(), prompt, &out.merged, cfg.alpha);
  return out;
}

Embedding seen_prototype(const FoundationalHub& hub, int class_id, double alpha_seen) {
  const HubEntry& e = hub.entry(class_id);
  return encode(hub.encoder(), ClassPrompt{class_id, e.class_name}, &e.task_vector, alpha_seen);
}

// ---------------------------------------------------------------------------
// Classification

PrototypeBank build_prototypes(const FoundationalHub& hub, const std::vector<int>& seen,
                               const std::vector<CandidateClass>& unseen, const ClassifyConfig& cfg) {
  PrototypeBank bank;
  const auto total = static_cast<Eigen::Index>(seen.size() + unseen.size());
  if (total == 0) throw ContractError("classify: empty candidate set");
  bank.prototypes.resize(hub.encoder().embed_dim(), total);
  Eigen::Index col = 0;
  for (int c : seen) {
    bank.class_ids.push_back(c);
    bank.prototypes.col(col++) = seen_prototype(hub, c, cfg.alpha_seen);
  }
  for (const auto& u : unseen) {
    if (std::find(seen.begin(), seen.end(), u.class_id) != seen.end())
      throw ContractError("classify: class " + std::to_string(u.class_id) + " is both seen and unseen");
    bank.class_ids.push_back(u.class_id);
    const bool forged = cfg.forge_unseen && !hub.empty() && cfg.forge.alpha > 0.0;
    bank.prototypes.col(col++) = forged ? forge(hub, u.class_name, cfg.forge).embedding
                                        : encode_zero_shot(hub.encoder(), ClassPrompt{u.class_id, u.class_name});
  }
  return bank;
}

PrototypeBank zero_shot_prototypes(const ReferenceEncoder& encoder, const std::vector<CandidateClass>& classes) {
  if (classes.empty()) throw ContractError("classify: empty candidate set");
  PrototypeBank bank;
  bank.prototypes.resize(encoder.embed_dim(), static_cast<Eigen::Index>(classes.size()));
  for (std::size_t i = 0; i < classes.size(); ++i) {
    bank.class_ids.push_back(classes[i].class_id);
    bank.prototypes.col(static_cast<Eigen::Index>(i)) =
        encode_zero_shot(encoder, ClassPrompt{classes[i].class_id, classes[i].class_name});
  }
  return bank;
}

Prediction classify(const PrototypeBank& bank, const Embedding& z_vis, const std::optional<std::vector<int>>& task_classes) {
  if (z_vis.size() != bank.prototypes.rows()) throw DimensionError("classify: query dimension mismatch");
  const double norm = z_vis.norm();
  if (!(norm > 0.0)) throw DomainError("classify: zero query");
  Prediction p;
  for (std::size_t i = 0; i < bank.class_ids.size(); ++i) {
    const int c = bank.class_ids[i];
    if (task_classes && std::find(task_classes->begin(), task_classes->end(), c) == task_classes->end()) continue;
    const double s = bank.prototypes.col(static_cast<Eigen::Index>(i)).dot(z_vis) / norm;
    p.ranking.push_back({c, std::clamp(s, -1.0, 1.0)});
  }
  if (p.ranking.empty()) throw ContractError("classify: empty candidate set");
  std::sort(p.ranking.begin(), p.ranking.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.sim != b.sim ? a.sim > b.sim : a.class_id < b.class_id;
  });
  return p;
}

Prediction classify(const FoundationalHub& hub, const Embedding& z_vis, const std::vector<int>& seen,
                    const std::vector<CandidateClass>& unseen, const ClassifyConfig& cfg, Protocol protocol,
                    const std::vector<int>& task_classes) {
  if (protocol == Protocol::ClassIL) return classify(build_prototypes(hub, seen, unseen, cfg), z_vis);
  if (task_classes.empty()) throw ContractError("classify: task-aware protocol needs the task's classes");
  std::vector<int> seen_in_task;
  std::vector<CandidateClass> unseen_in_task;
  for (int c : seen)
    if (std::find(task_classes.begin(), task_classes.end(), c) != task_classes.end()) seen_in_task.push_back(c);
  for (const auto& u : unseen)
    if (std::find(task_classes.begin(), task_classes.end(), u.class_id) != task_classes.end()) unseen_in_task.push_back(u);
  return classify(build_prototypes(hub, seen_in_task, unseen_in_task, cfg), z_vis, task_classes);
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr char kMagic[4] = {'M', 'O', 'D', 'R'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void put_matrix(const Matrix& m) {
    put(static_cast<std::uint32_t>(m.rows()));
    put(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put(static_cast<float>(m(r, c)));
  }
  std::vector<unsigned char> bytes;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, std::size_t end, std::string label = "hub file")
      : bytes_(b), end_(end), label_(std::move(label)) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  Matrix get_matrix(const char* what) {
    const auto rows = get<std::uint32_t>(what);
    const auto cols = get<std::uint32_t>(what);
    if (static_cast<std::uint64_t>(rows) * cols * sizeof(float) > end_ - pos_)
      throw FormatError(label_ + " truncated while reading " + what);
    Matrix m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = static_cast<double>(get<float>(what));
    if (!m.allFinite()) throw FormatError(label_ + " holds non-finite values in " + what);
    return m;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > end_ - pos_) throw FormatError(label_ + " truncated while reading " + what);
  }
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::string label_;
  std::size_t pos_ = 0;
};

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t checksum(const std::vector<unsigned char>& bytes, std::size_t n) {
  Fnv1a h;
  h.update(bytes.data(), n);
  return h.digest();
}

HubFileInfo read_header(Reader& in) {
  char magic[4];
  for (char& c : magic) c = static_cast<char>(in.get<std::uint8_t>("magic"));
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("hub file: bad magic (expected MODR)");
  HubFileInfo info;
  info.version = in.get<std::uint32_t>("version");
  if (info.version != kHubFormatVersion)
    throw FormatError("hub file: unsupported version " + std::to_string(info.version) + " (expected " +
                      std::to_string(kHubFormatVersion) + ")");
  info.encoder_fingerprint = in.get<std::uint64_t>("encoder fingerprint");
  info.hub_seed = in.get<std::uint64_t>("hub seed");
  const auto variant = in.get<std::uint32_t>("variant");
  if (variant > 1) throw FormatError("hub file: unknown adapter variant " + std::to_string(variant));
  info.variant = variant == 0 ? AdapterVariant::Lora : AdapterVariant::Vera;
  info.rank = in.get<std::uint32_t>("rank");
  info.entries = in.get<std::uint32_t>("entry count");
  return info;
}

std::size_t verified_payload_end(const std::vector<unsigned char>& bytes, const char (&magic)[4] = kMagic,
                                 const std::string& label = "hub file") {
  if (bytes.size() < sizeof(magic) + sizeof(std::uint64_t)) throw FormatError(label + " truncated: too short");
  const std::size_t end = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + end, sizeof stored);
  if (std::memcmp(bytes.data(), magic, 4) != 0)
    throw FormatError(label + ": bad magic (expected " + std::string(magic, 4) + ")");
  if (stored != checksum(bytes, end)) throw FormatError(label + ": checksum mismatch (truncated or corrupted)");
  return end;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

constexpr char kGeneratorMagic[4] = {'M', 'O', 'D', 'G'};

}  // namespace

std::vector<unsigned char> serialize(const FoundationalHub& hub) {
  Writer w;
  for (char c : kMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kHubFormatVersion);
  w.put(hub.encoder_fingerprint());
  w.put(hub.hub_seed());
  const auto& entries = hub.entries();
  const AdapterVariant variant = entries.empty() ? AdapterVariant::Lora : entries.front().adapter.variant;
  w.put(static_cast<std::uint32_t>(variant == AdapterVariant::Lora ? 0 : 1));
  w.put(static_cast<std::uint32_t>(entries.empty() ? 0 : entries.front().adapter.rank));
  w.put(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.put(static_cast<std::int32_t>(e.class_id));
    w.put(static_cast<std::int32_t>(e.task_id));
    w.put_string(e.class_name);
    w.put(static_cast<std::uint32_t>(e.adapter.params.size()));
    for (const auto& [name, p] : e.adapter.params) {
      w.put_string(name);
      w.put_matrix(p.value);
    }
    w.put_matrix(e.zero_shot);
  }
  w.put(checksum(w.bytes, w.bytes.size()));
  return std::move(w.bytes);
}

void save(const FoundationalHub& hub, const std::filesystem::path& path) {
  const auto bytes = serialize(hub);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("save: write failed for " + path.string());
}

HubFileInfo read_hub_info(const std::vector<unsigned char>& bytes) {
  const std::size_t end = verified_payload_end(bytes);
  Reader in(bytes, end);
  return read_header(in);
}

FoundationalHub deserialize(const std::vector<unsigned char>& bytes, std::shared_ptr<const ReferenceEncoder> encoder) {
  if (!encoder) throw ContractError("load: missing encoder");
  const std::size_t end = verified_payload_end(bytes);
  Reader in(bytes, end);
  const HubFileInfo info = read_header(in);
  if (info.encoder_fingerprint != encoder->fingerprint())
    throw FormatError("hub file: encoder fingerprint mismatch (file " + hex64(info.encoder_fingerprint) + ", encoder " +
                      hex64(encoder->fingerprint()) + ")");

  FoundationalHub hub(encoder, info.hub_seed);
  std::shared_ptr<const VeraBasis> basis;
  if (info.variant == AdapterVariant::Vera && info.entries > 0)
    basis = make_vera_basis(*encoder, static_cast<int>(info.rank), info.hub_seed);

  const auto& layers = encoder->adapted_layers();
  for (std::uint32_t i = 0; i < info.entries; ++i) {
    HubEntry e;
    e.class_id = in.get<std::int32_t>("class id");
    e.task_id = in.get<std::int32_t>("task id");
    e.class_name = in.get_string("class name");
    e.adapter.variant = info.variant;
    e.adapter.rank = static_cast<int>(info.rank);
    e.adapter.class_id = e.class_id;
    e.adapter.basis = basis;
    const auto nparams = in.get<std::uint32_t>("parameter count");
    for (std::uint32_t p = 0; p < nparams; ++p) {
      const std::string name = in.get_string("parameter name");
      e.adapter.params.add(name, in.get_matrix("adapter factor"));
    }
    if (e.adapter.num_layers() != layers.size())
      throw FormatError("hub file: entry " + std::to_string(e.class_id) + " has the wrong number of adapted layers");
    try {
      e.task_vector = materialize(e.adapter);
    } catch (const Error& err) {
      throw FormatError(std::string("hub file: inconsistent adapter factors: ") + err.what());
    }
    for (std::size_t l = 0; l < layers.size(); ++l)
      if (e.task_vector.deltas[l].rows() != layers[l].rows || e.task_vector.deltas[l].cols() != layers[l].cols)
        throw FormatError("hub file: adapter shape does not match the encoder");
    const Matrix cache = in.get_matrix("zero-shot cache");
    if (cache.cols() != 1 || cache.rows() != encoder->embed_dim()) throw FormatError("hub file: cache has the wrong shape");
    e.zero_shot = cache.col(0);
    try {
      hub.restore_entry(std::move(e));
    } catch (const ContractError& err) {
      throw FormatError(std::string("hub file: ") + err.what());
    }
  }
  if (in.pos() != end) throw FormatError("hub file: trailing bytes after the last entry");
  return hub;
}

FoundationalHub load(const std::filesystem::path& path, std::shared_ptr<const ReferenceEncoder> encoder) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, std::move(encoder));
}

std::vector<unsigned char> serialize(const DiffusionGenerator& gen) {
  Writer w;
  for (char c : kGeneratorMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kHubFormatVersion);
  w.put(static_cast<std::int32_t>(gen.task_id));
  w.put(gen.seed);
  w.put(static_cast<std::uint32_t>(gen.dim));
  w.put(static_cast<std::uint32_t>(gen.cond_dim));
  w.put(static_cast<std::uint32_t>(gen.time_dim));
  w.put(gen.feature_scale);
  w.put(gen.final_loss);
  w.put(static_cast<std::uint32_t>(gen.schedule.steps()));
  for (double b : gen.schedule.betas) w.put(b);
  w.put(static_cast<std::uint32_t>(gen.class_ids.size()));
  for (int c : gen.class_ids) w.put(static_cast<std::int32_t>(c));
  w.put(static_cast<std::uint32_t>(gen.net.size()));
  for (const auto& [name, p] : gen.net) {
    w.put_string(name);
    w.put_matrix(p.value);
  }
  w.put(checksum(w.bytes, w.bytes.size()));
  return std::move(w.bytes);
}

DiffusionGenerator deserialize_generator(const std::vector<unsigned char>& bytes) {
  const std::string label = "generator file";
  const std::size_t end = verified_payload_end(bytes, kGeneratorMagic, label);
  Reader in(bytes, end, label);
  for (int i = 0; i < 4; ++i) (void)in.get<std::uint8_t>("magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kHubFormatVersion) throw FormatError(label + ": unsupported version " + std::to_string(version));
  DiffusionGenerator g;
  g.task_id = in.get<std::int32_t>("task id");
  g.seed = in.get<std::uint64_t>("seed");
  g.dim = static_cast<int>(in.get<std::uint32_t>("dim"));
  g.cond_dim = static_cast<int>(in.get<std::uint32_t>("cond dim"));
  g.time_dim = static_cast<int>(in.get<std::uint32_t>("time dim"));
  g.feature_scale = in.get<double>("feature scale");
  g.final_loss = in.get<double>("final loss");
  const auto steps = in.get<std::uint32_t>("schedule length");
  if (steps == 0 || steps > (end - in.pos()) / sizeof(double)) throw FormatError(label + ": bad schedule length");
  double bar = 1.0;
  for (std::uint32_t t = 0; t < steps; ++t) {
    const double beta = in.get<double>("beta");
    if (!(beta > 0.0 && beta < 1.0)) throw FormatError(label + ": beta outside (0, 1)");
    g.schedule.betas.push_back(beta);
    g.schedule.alphas.push_back(1.0 - beta);
    bar *= 1.0 - beta;
    g.schedule.alpha_bars.push_back(bar);
  }
  const auto classes = in.get<std::uint32_t>("class count");
  if (classes > (end - in.pos()) / sizeof(std::int32_t)) throw FormatError(label + ": bad class count");
  for (std::uint32_t i = 0; i < classes; ++i) g.class_ids.push_back(in.get<std::int32_t>("class id"));
  if (!std::is_sorted(g.class_ids.begin(), g.class_ids.end())) throw FormatError(label + ": class ids not sorted");
  const auto nparams = in.get<std::uint32_t>("parameter count");
  for (std::uint32_t p = 0; p < nparams; ++p) {
    const std::string name = in.get_string("parameter name");
    if (g.net.contains(name)) throw FormatError(label + ": duplicate parameter " + name);
    g.net.add(name, in.get_matrix("parameter"));
  }
  if (in.pos() != end) throw FormatError(label + ": trailing bytes");
  if (!g.net.contains("class_embedding") || g.net.value("class_embedding").rows() != static_cast<Eigen::Index>(classes))
    throw FormatError(label + ": class embedding does not match the class list");
  try {
    const int depth = mlp_depth(g.net);
    if (g.net.value(mlp_weight_name(0)).cols() != g.dim + g.cond_dim + g.time_dim ||
        g.net.value(mlp_weight_name(depth - 1)).rows() != g.dim)
      throw FormatError(label + ": network shape does not match its dimensions");
  } catch (const ContractError& e) {
    throw FormatError(label + ": " + e.what());
  }
  return g;
}

void save_generator(const DiffusionGenerator& gen, const std::filesystem::path& path) { write_file(path, serialize(gen)); }

DiffusionGenerator load_generator(const std::filesystem::path& path) { return deserialize_generator(read_file(path)); }

}  // namespace moder
