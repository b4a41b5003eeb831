#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moder/encoder.hpp"
#include "moder/replay.hpp"

namespace moder {

struct HubEntry {
  int class_id = 0;
  std::string class_name;
  AdapterModule adapter;
  /// Canonical-template embedding with no adapter; serves text-to-text retrieval.
  Embedding zero_shot;
  int task_id = 0;
  /// materialize(adapter), kept in sync with `adapter`.
  TaskVector task_vector;
};

/// Growing store of per-class experts. Read-only operations (top_k, forge,
/// classify) are safe to call concurrently; insert and update need exclusive
/// access.
class FoundationalHub {
 public:
  FoundationalHub(std::shared_ptr<const ReferenceEncoder> encoder, std::uint64_t hub_seed);

  const ReferenceEncoder& encoder() const { return *encoder_; }
  std::shared_ptr<const ReferenceEncoder> encoder_handle() const { return encoder_; }
  std::uint64_t hub_seed() const { return hub_seed_; }
  std::uint64_t encoder_fingerprint() const { return encoder_->fingerprint(); }

  /// Appends an entry and computes its zero-shot cache. Duplicate ids throw.
  void insert(int class_id, const std::string& class_name, AdapterModule adapter, int task_id);
  /// Replaces the adapter of an existing entry (continued training).
  void update_adapter(int class_id, AdapterModule adapter);

  bool contains(int class_id) const { return index_.count(class_id) != 0; }
  const HubEntry& entry(int class_id) const;
  const std::vector<HubEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Hash over every entry's id, name, task, adapter values and cache.
  std::uint64_t fingerprint() const;

  /// Used by load(); bypasses the cache computation.
  void restore_entry(HubEntry entry);

 private:
  std::shared_ptr<const ReferenceEncoder> encoder_;
  std::uint64_t hub_seed_;
  std::vector<HubEntry> entries_;
  std::map<int, std::size_t> index_;
};

struct ForgeConfig {
  int k = 5;
  double alpha = 0.25;
  /// Softmax temperature over raw similarities.
  double temperature = 1.0;
  PromptTemplate unseen_template = canonical_template();
};

struct Neighbor {
  int class_id = 0;
  double sim = 0.0;
};

/// The min(k, size) entries with the highest cosine between their cached
/// zero-shot embedding and `query`, descending, ties to the lower class id.
std::vector<Neighbor> top_k(const FoundationalHub& hub, const Embedding& query, int k);
std::vector<Neighbor> top_k(const FoundationalHub& hub, const ClassPrompt& unseen, int k);

struct MergeReport {
  std::string class_name;
  std::vector<int> contributors;
  std::vector<double> sims;
  std::vector<double> weights;
  double alpha = 0.0;
  int k = 0;
};

nlohmann::json to_json(const MergeReport& report);

struct ForgedPrototype {
  Embedding embedding;
  TaskVector merged;
  MergeReport report;
};

/// Mixture of textual experts for a class that has no expert: softmax over
/// the top-K similarities, weighted sum of task vectors, and one encode with
/// theta0 + alpha * merged.
ForgedPrototype forge(const FoundationalHub& hub, const std::string& class_name, const ForgeConfig& cfg);

/// encode(canonical prompt, tau_i, alpha_seen).
Embedding seen_prototype(const FoundationalHub& hub, int class_id, double alpha_seen = 1.0);

enum class Protocol { ClassIL, Mtil };

struct CandidateClass {
  int class_id = 0;
  std::string class_name;
};

struct ClassifyConfig {
  ForgeConfig forge;
  double alpha_seen = 1.0;
  /// When false, unseen classes use their zero-shot prototype.
  bool forge_unseen = true;
};

/// Class prototypes for one evaluation round: seen classes through their
/// experts, unseen ones forged.
struct PrototypeBank {
  std::vector<int> class_ids;
  Matrix prototypes;  // d x C, unit columns
};

PrototypeBank build_prototypes(const FoundationalHub& hub, const std::vector<int>& seen,
                               const std::vector<CandidateClass>& unseen, const ClassifyConfig& cfg);

/// Zero-shot prototypes (canonical template, frozen weights).
PrototypeBank zero_shot_prototypes(const ReferenceEncoder& encoder, const std::vector<CandidateClass>& classes);

struct Prediction {
  std::vector<Neighbor> ranking;  // (class id, cosine) descending
  int top1() const { return ranking.front().class_id; }
};

/// Scores z_vis against the bank. `task_classes`, when given, restricts the
/// candidates to those classes (task-aware protocol).
Prediction classify(const PrototypeBank& bank, const Embedding& z_vis,
                    const std::optional<std::vector<int>>& task_classes = std::nullopt);

Prediction classify(const FoundationalHub& hub, const Embedding& z_vis, const std::vector<int>& seen,
                    const std::vector<CandidateClass>& unseen, const ClassifyConfig& cfg, Protocol protocol,
                    const std::vector<int>& task_classes = {});

// ---------------------------------------------------------------------------
// Persistence: "MODR" | u32 version | u64 encoder fingerprint | u64 hub seed |
// u32 variant | u32 rank | u32 entries | entries... | u64 FNV-1a of all
// preceding bytes. Little-endian, float32 payloads.

inline constexpr std::uint32_t kHubFormatVersion = 1;

void save(const FoundationalHub& hub, const std::filesystem::path& path);
std::vector<unsigned char> serialize(const FoundationalHub& hub);

/// Throws FormatError on bad magic, version, checksum, truncation or
/// encoder fingerprint mismatch.
FoundationalHub load(const std::filesystem::path& path, std::shared_ptr<const ReferenceEncoder> encoder);
FoundationalHub deserialize(const std::vector<unsigned char>& bytes, std::shared_ptr<const ReferenceEncoder> encoder);

/// Header fields readable without an encoder.
struct HubFileInfo {
  std::uint32_t version = 0;
  std::uint64_t encoder_fingerprint = 0;
  std::uint64_t hub_seed = 0;
  AdapterVariant variant = AdapterVariant::Lora;
  std::uint32_t rank = 0;
  std::uint32_t entries = 0;
};
HubFileInfo read_hub_info(const std::vector<unsigned char>& bytes);

// Generators use the same container with magic "MODG": task id, seed, dims,
// float64 schedule betas, sorted class ids, then the named float32 network
// tensors and the checksum trailer.
std::vector<unsigned char> serialize(const DiffusionGenerator& gen);
DiffusionGenerator deserialize_generator(const std::vector<unsigned char>& bytes);
void save_generator(const DiffusionGenerator& gen, const std::filesystem::path& path);
DiffusionGenerator load_generator(const std::filesystem::path& path);

}  // namespace moder
