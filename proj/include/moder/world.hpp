#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "moder/encoder.hpp"
#include "moder/replay.hpp"

namespace moder {

struct WorldConfig {
  int num_classes = 20;
  int num_families = 5;
  /// Scale of the shared per-family shift (domain gap).
  double gamma = 1.0;
  /// Scale of the per-class private shift.
  double delta = 0.15;
  /// Tangent-space noise around the class mean.
  double sigma = 0.08;
};

struct WorldClass {
  int class_id = 0;
  std::string name;  // "<family adjective> <noun>"
  int family = 0;
  Embedding mean;    // unit norm
};

/// Synthetic visual-embedding distributions anchored to the encoder's
/// zero-shot text embeddings. Class c belongs to family c % num_families.
struct SyntheticWorld {
  WorldConfig config;
  std::uint64_t seed = 0;
  std::uint64_t encoder_fingerprint = 0;
  std::vector<WorldClass> classes;
  std::vector<Embedding> family_shifts;  // unit norm

  int dim() const { return static_cast<int>(classes.front().mean.size()); }
  const WorldClass& at(int class_id) const;
};

SyntheticWorld generate_world(const WorldConfig& cfg, const ReferenceEncoder& encoder, std::uint64_t seed);

/// Draws normalize(mean + sigma * u) with u standard normal projected onto
/// the tangent space at the mean.
std::vector<Embedding> sample_class(const SyntheticWorld& world, int class_id, int n, std::uint64_t seed);

enum class StreamProtocol { ClassIL, Mtil };

struct StreamConfig {
  StreamProtocol protocol = StreamProtocol::ClassIL;
  int tasks = 5;
  /// Class-IL only; MTIL tasks hold every member of one family.
  int classes_per_task = 4;
  int train_per_class = 100;
  int test_per_class = 50;
};

struct Task {
  int task_id = 0;
  std::vector<int> class_ids;  // sorted
};

/// Class-IL: a seeded permutation of the roster cut into consecutive tasks.
/// MTIL: task t is family t.
struct TaskStream {
  StreamProtocol protocol = StreamProtocol::ClassIL;
  std::vector<Task> tasks;
  int train_per_class = 0;
  int test_per_class = 0;

  std::vector<int> all_classes() const;
  /// Classes of tasks 0..t.
  std::vector<int> seen_through(int t) const;
};

TaskStream make_stream(const SyntheticWorld& world, const StreamConfig& cfg, std::uint64_t seed);

struct TaskSplit {
  std::vector<LabeledEmbedding> train;
  std::vector<LabeledEmbedding> test;
};

/// One split per task. Samples for (class, split) come from their own seeded
/// substream, so splits do not depend on task order.
std::vector<TaskSplit> sample_split(const SyntheticWorld& world, const TaskStream& stream, std::uint64_t seed);

nlohmann::json to_json(const SyntheticWorld& world);

}  // namespace moder
