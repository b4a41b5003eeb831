#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "moder/mlp.hpp"

namespace moder {

struct LabeledEmbedding {
  Embedding x;
  int class_id = 0;
};

/// Variance schedule indexed by diffusion step t = 1..T (stored 0-based).
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  /// Linearly spaced betas; `steps` >= 1 and 0 < start <= end < 1.
  static NoiseSchedule linear(int steps, double beta_start, double beta_end);

  int steps() const { return static_cast<int>(betas.size()); }
  double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t - 1)); }
};

struct DiffusionConfig {
  int steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  /// Multiply the beta endpoints by 1000/steps so short chains keep the
  /// terminal signal level of a 1000-step linear schedule.
  bool scale_to_steps = true;
  int hidden = 256;
  int layers = 8;
  int cond_dim = 16;
  int time_dim = 16;
  int iterations = 2000;
  int batch = 128;
  double lr = 1e-3;
  double weight_decay = 1e-2;

  NoiseSchedule schedule() const;
};

/// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
Matrix q_sample(const NoiseSchedule& schedule, const Matrix& x0, const Matrix& eps, int t);

/// Sinusoidal embedding of step t (sin on even, cos on odd slots).
Vector timestep_embedding(int t, int dim);

/// Class-conditioned epsilon-prediction MLP for the classes of one task.
/// Features enter the chain multiplied by `feature_scale` (sqrt(d)), so a
/// unit-norm embedding has unit per-coordinate scale.
struct DiffusionGenerator {
  ParamSet net;  // MLP layers plus "class_embedding" (classes x cond_dim)
  NoiseSchedule schedule;
  std::vector<int> class_ids;  // sorted
  int task_id = 0;
  int dim = 0;
  int cond_dim = 0;
  int time_dim = 0;
  double feature_scale = 1.0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;

  int class_index(int class_id) const;
  std::uint64_t fingerprint() const { return net.fingerprint(); }
};

/// Untrained generator with the configured architecture.
DiffusionGenerator make_generator(std::vector<int> class_ids, int task_id, int dim, const DiffusionConfig& cfg,
                                  std::uint64_t seed);

/// Predicted noise for a batch of noisy rows, all of class `class_index` at step t.
Matrix predict_noise(const DiffusionGenerator& gen, const Matrix& x_t, int class_index, int t);

/// Differentiable denoising loss on one minibatch. Used by training and by
/// gradient checks.
Var denoising_loss(Tape& tape, const DiffusionGenerator& gen, const Matrix& x_t, const std::vector<int>& class_indices,
                   const std::vector<int>& steps, const Matrix& eps);

using GeneratorLossLog = std::function<void(int iteration, double loss)>;

/// Trains the epsilon-net with MSE on q(x_t | x_0). Throws ContractError on
/// empty input and DivergenceError on a non-finite loss.
DiffusionGenerator train_generator(std::span<const LabeledEmbedding> features, int task_id, const DiffusionConfig& cfg,
                                   std::uint64_t seed, const GeneratorLossLog& log = {});

/// DDPM ancestral sampling from x_T ~ N(0, I), L2-normalized at the end.
/// Draw order from SeededRng(seed): x_T row-major, then one n x d block per
/// step t = T..2.
std::vector<Embedding> sample(const DiffusionGenerator& gen, int class_id, int n, std::uint64_t seed);

struct SyntheticDataset {
  std::vector<LabeledEmbedding> items;
  std::map<int, int> per_class_counts;
  std::vector<int> generator_tasks;
};

/// Seed for chunk `chunk` of class `class_id` from the generator of `task_id`.
std::uint64_t synthetic_chunk_seed(std::uint64_t seed, int task_id, int class_id, int chunk);

/// Balanced replay set: `per_class` samples for every class of every
/// generator, drawn in chunks of `batch`, then shuffled by `seed`.
SyntheticDataset build_synthetic_dataset(std::span<const DiffusionGenerator* const> generators, int per_class, int batch,
                                         std::uint64_t seed);

/// The `per_class` samples build_synthetic_dataset draws for one class.
std::vector<Embedding> synthetic_class_samples(const DiffusionGenerator& gen, int class_id, int per_class, int batch,
                                               std::uint64_t seed);

/// The deterministic shuffle applied by build_synthetic_dataset.
void shuffle_synthetic(SyntheticDataset& ds, std::uint64_t seed);

}  // namespace moder
