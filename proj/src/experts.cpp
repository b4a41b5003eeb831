#include "moder/experts.hpp"

#include <algorithm>
#include <cmath>

#include "moder/hash.hpp"

namespace moder {

namespace {

void check_index(const Vector& sims, Eigen::Index j) {
  if (sims.size() == 0) throw ContractError("loss: empty similarity list");
  if (j < 0 || j >= sims.size()) throw ContractError("loss: true class is not among the indexed classes");
}

}  // namespace

double sigmoid_loss(const Vector& sims, Eigen::Index true_index) {
  check_index(sims, true_index);
  double total = 0.0;
  for (Eigen::Index i = 0; i < sims.size(); ++i) {
    const double y = (i == true_index) ? 1.0 : -1.0;
    total += softplus(-sims(i) * y);
  }
  return total;
}

Vector sigmoid_loss_grad(const Vector& sims, Eigen::Index true_index) {
  check_index(sims, true_index);
  Vector g(sims.size());
  for (Eigen::Index i = 0; i < sims.size(); ++i) {
    const double y = (i == true_index) ? 1.0 : -1.0;
    g(i) = -y * sigmoid(-sims(i) * y);
  }
  return g;
}

double cross_entropy_loss(const Vector& sims, Eigen::Index true_index, double temperature) {
  check_index(sims, true_index);
  if (!(temperature > 0.0)) throw ContractError("cross_entropy_loss: temperature must be positive");
  const Vector logits = sims / temperature;
  const double m = logits.maxCoeff();
  return m + std::log((logits.array() - m).exp().sum()) - logits(true_index);
}

// ---------------------------------------------------------------------------

ExpertSet::ExpertSet(std::shared_ptr<const ReferenceEncoder> encoder, std::vector<PromptTemplate> templates)
    : encoder_(std::move(encoder)), templates_(std::move(templates)) {
  if (!encoder_) throw ContractError("ExpertSet: missing encoder");
  if (templates_.empty()) templates_ = default_templates(1);
}

ExpertSet::ExpertSet(const ExpertSet& other)
    : encoder_(other.encoder_),
      templates_(other.templates_),
      experts_(other.experts_),
      vera_basis_(other.vera_basis_),
      vera_seed_(other.vera_seed_) {}

ExpertSet& ExpertSet::operator=(const ExpertSet& other) {
  if (this != &other) {
    encoder_ = other.encoder_;
    templates_ = other.templates_;
    experts_ = other.experts_;
    vera_basis_ = other.vera_basis_;
    vera_seed_ = other.vera_seed_;
    leases_ = std::make_unique<Leases>();
  }
  return *this;
}

const Expert& ExpertSet::at(int class_id) const {
  auto it = experts_.find(class_id);
  if (it == experts_.end()) throw LookupError("ExpertSet: no expert for class " + std::to_string(class_id));
  return it->second;
}

Expert& ExpertSet::at(int class_id) {
  auto it = experts_.find(class_id);
  if (it == experts_.end()) throw LookupError("ExpertSet: no expert for class " + std::to_string(class_id));
  return it->second;
}

std::vector<int> ExpertSet::class_ids() const {
  std::vector<int> ids;
  for (const auto& [id, e] : experts_) ids.push_back(id);
  return ids;
}

void ExpertSet::add_expert(int class_id, const std::string& class_name, int task_id, const TrainConfig& cfg,
                           std::uint64_t hub_seed) {
  if (contains(class_id)) throw ContractError("ExpertSet: expert for class " + std::to_string(class_id) + " exists");
  if (!experts_.empty() && experts_.begin()->second.adapter.variant != cfg.variant)
    throw ContractError("ExpertSet: all experts must share one adapter variant");
  Expert e;
  e.class_name = class_name;
  e.task_id = task_id;
  if (cfg.variant == AdapterVariant::Lora) {
    e.adapter = make_lora_adapter(*encoder_, class_id, cfg.rank, hub_seed);
  } else {
    if (!vera_basis_ || vera_seed_ != hub_seed || vera_basis_->rank != cfg.rank) {
      if (vera_basis_) throw ContractError("ExpertSet: VeRA basis already drawn from a different hub seed or rank");
      vera_basis_ = make_vera_basis(*encoder_, cfg.rank, hub_seed);
      vera_seed_ = hub_seed;
    }
    e.adapter = make_vera_adapter(*encoder_, class_id, vera_basis_);
  }
  experts_.emplace(class_id, std::move(e));
}

void ExpertSet::set_adapter(int class_id, AdapterModule adapter) { at(class_id).adapter = std::move(adapter); }

std::uint64_t ExpertSet::fingerprint() const {
  Fnv1a h;
  for (const auto& [id, e] : experts_) {
    h.update(static_cast<std::uint64_t>(id));
    h.update(e.adapter.params.fingerprint());
  }
  return h.digest();
}

void ExpertSet::acquire(std::span<const int> subset) {
  std::lock_guard lock(leases_->mutex);
  for (int c : subset)
    if (leases_->held.count(c))
      throw ContractError("batched_expert_update: expert " + std::to_string(c) + " is already being updated");
  for (int c : subset) leases_->held.insert(c);
}

void ExpertSet::release(std::span<const int> subset) {
  std::lock_guard lock(leases_->mutex);
  for (int c : subset) leases_->held.erase(c);
}

// ---------------------------------------------------------------------------

std::size_t template_draw(const TrainConfig& cfg, std::size_t num_templates, int step, int class_id) {
  if (!cfg.template_augmentation || num_templates <= 1) return 0;
  SeededRng rng(derive_seed(cfg.seed, {0x544d504cULL, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(class_id)}));
  return static_cast<std::size_t>(rng.uniform_int(num_templates));
}

DataBatch draw_data_batch(const SyntheticDataset& dsyn, const TrainConfig& cfg, int step) {
  if (dsyn.items.empty()) throw ContractError("draw_data_batch: empty dataset");
  if (cfg.data_batch <= 0) throw ContractError("draw_data_batch: batch size must be positive");
  SeededRng rng(derive_seed(cfg.seed, {0x44415441ULL, static_cast<std::uint64_t>(step)}));
  const auto dim = dsyn.items.front().x.size();
  DataBatch b;
  b.z_vis.resize(cfg.data_batch, dim);
  b.labels.resize(static_cast<std::size_t>(cfg.data_batch));
  for (int r = 0; r < cfg.data_batch; ++r) {
    const auto& item = dsyn.items[rng.uniform_int(dsyn.items.size())];
    b.z_vis.row(r) = item.x.transpose();
    b.labels[static_cast<std::size_t>(r)] = item.class_id;
  }
  return b;
}

ExpertBatchGradients expert_batch_gradients(const ExpertSet& experts, std::span<const int> subset, const DataBatch& batch,
                                            const TrainConfig& cfg, int step) {
  ExpertBatchGradients out;
  if (subset.empty()) return out;

  Tape tape;
  Var z_vis = tape.constant(batch.z_vis);
  std::vector<Var> columns;
  for (int c : subset) {
    const Expert& e = experts.at(c);
    const std::size_t k = template_draw(cfg, experts.templates().size(), step, c);
    const Vector pooled = experts.encoder().pool(experts.templates()[k].render(e.class_name));
    Var z_text = encode_on_tape(tape, experts.encoder(), pooled, e.adapter, 1.0, std::to_string(c) + "/");
    columns.push_back(ag::matmul(z_vis, ag::transpose(z_text)));
  }
  Var sims = ag::concat_cols(columns);

  Var loss;
  if (cfg.loss == LossVariant::Sigmoid) {
    Matrix signs(sims.rows(), sims.cols());
    for (Eigen::Index r = 0; r < signs.rows(); ++r)
      for (Eigen::Index col = 0; col < signs.cols(); ++col)
        signs(r, col) = batch.labels[static_cast<std::size_t>(r)] == subset[static_cast<std::size_t>(col)] ? 1.0 : -1.0;
    Var logits = ag::scale(sims, cfg.logit_scale);
    if (cfg.logit_bias != 0.0) logits = ag::add(logits, tape.constant(Matrix::Constant(sims.rows(), sims.cols(), cfg.logit_bias)));
    loss = ag::sigmoid_loss(logits, signs);
  } else {
    std::vector<int> rows, labels;
    for (std::size_t r = 0; r < batch.labels.size(); ++r) {
      auto it = std::find(subset.begin(), subset.end(), batch.labels[r]);
      if (it == subset.end()) continue;
      rows.push_back(static_cast<int>(r));
      labels.push_back(static_cast<int>(it - subset.begin()));
    }
    if (rows.empty()) {
      // No positives for this batch of classes: zero gradient.
      for (int c : subset) {
        Gradients g;
        for (const auto& name : experts.at(c).adapter.params.trainable_names()) {
          const Matrix& v = experts.at(c).adapter.params.value(name);
          g.emplace(name, Matrix::Zero(v.rows(), v.cols()));
        }
        out.grads.emplace(c, std::move(g));
      }
      return out;
    }
    Matrix select = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), sims.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) select(static_cast<Eigen::Index>(i), rows[i]) = 1.0;
    loss = ag::cross_entropy(ag::matmul(tape.constant(select), sims), labels, cfg.ce_temperature);
  }

  out.loss = loss.value()(0, 0);
  Gradients all = tape.backward(loss);
  for (int c : subset) {
    const std::string prefix = std::to_string(c) + "/";
    Gradients g;
    for (const auto& name : experts.at(c).adapter.params.trainable_names()) g.emplace(name, std::move(all.at(prefix + name)));
    out.grads.emplace(c, std::move(g));
  }
  return out;
}

double batched_expert_update(ExpertSet& experts, std::span<const int> subset, const DataBatch& batch,
                             const TrainConfig& cfg, int step, std::map<int, AdamWState>& optimizers) {
  if (subset.empty()) return 0.0;
  experts.acquire(subset);
  try {
    ExpertBatchGradients res = expert_batch_gradients(experts, subset, batch, cfg, step);
    for (int c : subset) {
      auto it = optimizers.find(c);
      if (it == optimizers.end()) it = optimizers.emplace(c, AdamWState(AdamWConfig{cfg.lr, cfg.weight_decay})).first;
      adamw_step(experts.at(c).adapter.params, res.grads.at(c), it->second);
    }
    experts.release(subset);
    return res.loss;
  } catch (...) {
    experts.release(subset);
    throw;
  }
}

void train_task_experts(ExpertSet& experts, const SyntheticDataset& dsyn, const TrainConfig& cfg,
                        std::span<const int> trainable, const ExpertLossLog& log) {
  if (cfg.iterations < 0) throw ContractError("train_task_experts: negative iteration count");
  for (const auto& [c, n] : dsyn.per_class_counts)
    if (!experts.contains(c)) throw ContractError("train_task_experts: class " + std::to_string(c) + " has no expert");
  if (cfg.iterations == 0) return;

  std::vector<int> order = trainable.empty() ? experts.class_ids() : std::vector<int>(trainable.begin(), trainable.end());
  std::sort(order.begin(), order.end());
  for (int c : order) (void)experts.at(c);
  const std::size_t eb = (cfg.expert_batch <= 0) ? order.size()
                                                  : std::min<std::size_t>(static_cast<std::size_t>(cfg.expert_batch), order.size());

  std::map<int, AdamWState> optimizers;
  for (int c : order) optimizers.emplace(c, AdamWState(AdamWConfig{cfg.lr, cfg.weight_decay}));

  for (int step = 0; step < cfg.iterations; ++step) {
    const DataBatch batch = draw_data_batch(dsyn, cfg, step);
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += eb, ++batch_index) {
      const std::span<const int> subset(order.data() + start, std::min(eb, order.size() - start));
      const double loss = batched_expert_update(experts, subset, batch, cfg, step, optimizers);
      if (log) log(step, batch_index, loss);
    }
  }
}

double training_accuracy(const ExpertSet& experts, const SyntheticDataset& dsyn) {
  if (dsyn.items.empty()) throw ContractError("training_accuracy: empty dataset");
  std::vector<int> ids = experts.class_ids();
  Matrix protos(experts.encoder().embed_dim(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const Expert& e = experts.at(ids[k]);
    const TaskVector tv = materialize(e.adapter);
    protos.col(static_cast<Eigen::Index>(k)) = encode(experts.encoder(), ClassPrompt{ids[k], e.class_name}, &tv, 1.0);
  }
  std::size_t correct = 0;
  for (const auto& item : dsyn.items) {
    Eigen::Index best = 0;
    (item.x.transpose() * protos).maxCoeff(&best);
    if (ids[static_cast<std::size_t>(best)] == item.class_id) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dsyn.items.size());
}

}  // namespace moder
