#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "moder/experts.hpp"
#include "moder/hub.hpp"
#include "moder/metrics.hpp"
#include "moder/replay.hpp"
#include "moder/world.hpp"

namespace moder {

struct PipelineConfig {
  EncoderConfig encoder;
  WorldConfig world;
  StreamConfig stream;
  DiffusionConfig diffusion;
  int synthetic_per_class = 400;
  int synthetic_batch = 64;
  /// Appends the current task's real features to D_SYN (ablation only).
  bool mix_real_features = false;
  TrainConfig train;
  ClassifyConfig classify;
  /// Number of built-in templates used for augmentation (ignored when
  /// `template_file` is set).
  int template_count = 16;
  std::string template_file;
  bool mtil_transfer_inclusive = false;
  std::uint64_t seed = 1992;
  /// Workers for evaluation; results do not depend on it.
  int threads = 1;
};

/// Seeds of every phase, all derived from the master seed.
struct PhaseSeeds {
  std::uint64_t world = 0;
  std::uint64_t stream = 0;
  std::uint64_t split = 0;
  std::uint64_t synthetic = 0;
  std::uint64_t hub = 0;
  std::uint64_t generator(int task) const;
  std::uint64_t alignment(int task) const;

  std::uint64_t master = 0;
};
PhaseSeeds phase_seeds(std::uint64_t master);

/// World, stream and splits for a config.
struct Scenario {
  std::shared_ptr<const ReferenceEncoder> encoder;
  SyntheticWorld world;
  TaskStream stream;
  std::vector<TaskSplit> splits;
  Protocol protocol() const { return stream.protocol == StreamProtocol::Mtil ? Protocol::Mtil : Protocol::ClassIL; }
};
Scenario make_scenario(const PipelineConfig& cfg);

/// Generators and their per-class samples, reusable across runs whose world,
/// stream, diffusion and D_SYN settings agree.
struct ReplayCache {
  std::uint64_t key = 0;
  std::vector<DiffusionGenerator> generators;
  std::map<int, std::vector<Embedding>> class_samples;
};

struct RunLog {
  std::string generator_csv = "task,iteration,loss\n";
  std::string experts_csv = "task,iteration,expert_batch,loss\n";
};

struct TrainedRun {
  Scenario scenario;
  /// Hub state after each task.
  std::vector<FoundationalHub> hubs;
  std::vector<double> generator_final_loss;
  std::vector<double> dsyn_training_accuracy;
};

TrainedRun train_stream(const PipelineConfig& cfg, ReplayCache* cache = nullptr, RunLog* log = nullptr);

/// Fraction of `test` rows whose top-1 class over `bank` (restricted to
/// `task_classes` when given) matches the label.
double accuracy(const PrototypeBank& bank, const std::vector<LabeledEmbedding>& test,
                const std::optional<std::vector<int>>& task_classes = std::nullopt);

/// A(t, i) with seen classes through their experts and all others forged.
/// Class-IL scores against every class of the stream; MTIL only against
/// task i's classes.
AccuracyMatrix evaluate_stream(const TrainedRun& run, const ClassifyConfig& cfg, int threads = 1);

/// A(t, i) of the frozen encoder; identical rows.
AccuracyMatrix evaluate_zero_shot(const Scenario& scenario);

struct PipelineResult {
  TrainedRun run;
  AccuracyMatrix accuracy{1};
  AccuracyMatrix zero_shot{1};
  MetricsReport report;
  MetricsReport zero_shot_report;
  /// Merge reports of the forged classes after the first task.
  std::vector<MergeReport> merges;
  const FoundationalHub& hub() const { return run.hubs.back(); }
};

PipelineResult run_pipeline(const PipelineConfig& cfg, ReplayCache* cache = nullptr, RunLog* log = nullptr);

std::vector<PromptTemplate> pipeline_templates(const PipelineConfig& cfg);

}  // namespace moder
