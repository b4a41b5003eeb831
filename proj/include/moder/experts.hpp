#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "moder/adamw.hpp"
#include "moder/encoder.hpp"
#include "moder/replay.hpp"

namespace moder {

enum class LossVariant { Sigmoid, CrossEntropy };

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  int iterations = 500;
  int data_batch = 64;
  /// Experts per forward/backward pass; 0 means all trained experts at once.
  int expert_batch = 8;
  LossVariant loss = LossVariant::Sigmoid;
  bool template_augmentation = true;
  double ce_temperature = 1.0;
  /// Sigmoid logits are logit_scale * cos + logit_bias.
  double logit_scale = 10.0;
  double logit_bias = 0.0;
  /// Retrain experts of earlier tasks (true) or freeze them after their task.
  bool retrain_old = true;
  AdapterVariant variant = AdapterVariant::Lora;
  int rank = 16;
  std::uint64_t seed = 0;
};

/// Sum over classes i of log(1 + exp(-s_i * y_i)), y_i = +1 for i == true_index, -1 otherwise.
double sigmoid_loss(const Vector& sims, Eigen::Index true_index);
/// d sigmoid_loss / d s_i = -y_i * sigmoid(-s_i * y_i).
Vector sigmoid_loss_grad(const Vector& sims, Eigen::Index true_index);
/// -log softmax(sims / temperature)[true_index].
double cross_entropy_loss(const Vector& sims, Eigen::Index true_index, double temperature);

struct Expert {
  AdapterModule adapter;
  std::string class_name;
  int task_id = 0;
};

/// One adapter per seen class over a shared frozen encoder.
class ExpertSet {
 public:
  ExpertSet(std::shared_ptr<const ReferenceEncoder> encoder, std::vector<PromptTemplate> templates);
  ExpertSet(const ExpertSet& other);
  ExpertSet& operator=(const ExpertSet& other);
  ExpertSet(ExpertSet&&) = default;
  ExpertSet& operator=(ExpertSet&&) = default;

  const ReferenceEncoder& encoder() const { return *encoder_; }
  std::shared_ptr<const ReferenceEncoder> encoder_handle() const { return encoder_; }
  const std::vector<PromptTemplate>& templates() const { return templates_; }

  bool contains(int class_id) const { return experts_.count(class_id) != 0; }
  const Expert& at(int class_id) const;
  Expert& at(int class_id);
  const std::map<int, Expert>& experts() const { return experts_; }
  std::vector<int> class_ids() const;
  std::size_t size() const { return experts_.size(); }

  /// Adds a freshly initialized (zero-displacement) expert. VeRA experts
  /// draw the shared basis from `hub_seed` on first use.
  void add_expert(int class_id, const std::string& class_name, int task_id, const TrainConfig& cfg, std::uint64_t hub_seed);

  /// Replaces the adapter of an existing expert.
  void set_adapter(int class_id, AdapterModule adapter);

  std::uint64_t fingerprint() const;

  // Lease bookkeeping for concurrently updated expert batches.
  void acquire(std::span<const int> subset);
  void release(std::span<const int> subset);

 private:
  std::shared_ptr<const ReferenceEncoder> encoder_;
  std::vector<PromptTemplate> templates_;
  std::map<int, Expert> experts_;
  std::shared_ptr<const VeraBasis> vera_basis_;
  std::uint64_t vera_seed_ = 0;
  struct Leases {
    std::mutex mutex;
    std::set<int> held;
  };
  std::unique_ptr<Leases> leases_ = std::make_unique<Leases>();
};

/// Index into ExpertSet::templates() used by expert `class_id` at `step`.
/// Always 0 (the canonical template) when augmentation is off.
std::size_t template_draw(const TrainConfig& cfg, std::size_t num_templates, int step, int class_id);

/// Minibatch of D_SYN rows drawn for optimizer step `step`.
struct DataBatch {
  Matrix z_vis;  // N x d
  std::vector<int> labels;
};
DataBatch draw_data_batch(const SyntheticDataset& dsyn, const TrainConfig& cfg, int step);

/// Loss and per-expert gradients for one expert batch (keys: class id).
struct ExpertBatchGradients {
  double loss = 0.0;
  std::map<int, Gradients> grads;
};

/// Forward/backward through the experts in `subset` only. Under the sigmoid
/// loss the gradient of expert i depends on s_i alone. Under cross-entropy
/// the softmax runs over the classes of `subset` and only rows whose label is
/// in `subset` contribute, which is what splitting a cross-entropy update
/// into expert batches amounts to.
ExpertBatchGradients expert_batch_gradients(const ExpertSet& experts, std::span<const int> subset, const DataBatch& batch,
                                            const TrainConfig& cfg, int step);

/// Computes gradients for `subset` and applies one AdamW step to each of its
/// experts. Other experts are untouched. `subset` must not overlap a batch
/// that is being updated concurrently.
double batched_expert_update(ExpertSet& experts, std::span<const int> subset, const DataBatch& batch,
                             const TrainConfig& cfg, int step, std::map<int, AdamWState>& optimizers);

using ExpertLossLog = std::function<void(int iteration, int expert_batch, double loss)>;

/// Textual alignment on D_SYN: cfg.iterations steps; each step draws one data
/// batch, partitions the trained experts (sorted by class id) into batches of
/// cfg.expert_batch and updates each batch. Optimizer state is fresh per call.
/// `trainable` lists the experts to update (all experts when empty).
void train_task_experts(ExpertSet& experts, const SyntheticDataset& dsyn, const TrainConfig& cfg,
                        std::span<const int> trainable = {}, const ExpertLossLog& log = {});

/// Fraction of rows whose argmax cosine over expert prototypes (canonical
/// template, alpha = 1) matches the label.
double training_accuracy(const ExpertSet& experts, const SyntheticDataset& dsyn);

}  // namespace moder
