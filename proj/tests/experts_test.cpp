#include <set>

#include "doctest.h"
#include "moder/experts.hpp"
#include "support.hpp"

using namespace moder;
using namespace moder::testing;

namespace {

std::shared_ptr<const ReferenceEncoder> small_encoder() {
  return std::make_shared<const ReferenceEncoder>(small_encoder_config());
}

/// Tight blobs around random unit means, one per class.
SyntheticDataset blob_dataset(int classes, int dim, int per_class, double noise, std::uint64_t seed) {
  SeededRng rng(seed);
  SyntheticDataset ds;
  for (int c = 0; c < classes; ++c) {
    const Vector mean = l2_normalize(rng.normal_vector(dim));
    for (int i = 0; i < per_class; ++i) ds.items.push_back({l2_normalize(mean + noise * rng.normal_vector(dim)), c});
    ds.per_class_counts[c] = per_class;
  }
  return ds;
}

ExpertSet make_experts(const std::shared_ptr<const ReferenceEncoder>& enc, int classes, const TrainConfig& cfg) {
  ExpertSet set(enc, default_templates(4));
  const auto& words = word_pool();
  for (int c = 0; c < classes; ++c) set.add_expert(c, words[static_cast<std::size_t>(c)] + " " + words[static_cast<std::size_t>(19 - c)], 0, cfg, 99);
  return set;
}

double max_param_diff(const ExpertSet& a, const ExpertSet& b) {
  double d = 0.0;
  for (const auto& [id, e] : a.experts())
    for (const auto& [name, p] : e.adapter.params)
      d = std::max(d, (p.value - b.at(id).adapter.params.value(name)).cwiseAbs().maxCoeff());
  return d;
}

}  // namespace

TEST_CASE("sigmoid loss scalar examples") {
  CHECK(sigmoid_loss(Vector::Zero(5), 2) == doctest::Approx(5.0 * std::log(2.0)).epsilon(1e-15));
  const double a = sigmoid_loss((Vector(2) << 10.0, -10.0).finished(), 0);
  CHECK(a == doctest::Approx(2.0 * std::log1p(std::exp(-10.0))).epsilon(1e-12));
  CHECK(a == doctest::Approx(9.08e-5).epsilon(1e-3));
  const double b = sigmoid_loss((Vector(2) << -1.0, 1.0).finished(), 0);
  CHECK(b == doctest::Approx(2.0 * std::log1p(std::exp(1.0))).epsilon(1e-15));
  CHECK(b == doctest::Approx(2.6265).epsilon(1e-4));
  CHECK_THROWS_AS(sigmoid_loss(Vector::Zero(2), 2), ContractError);
}

TEST_CASE("sigmoid loss gradient matches finite differences") {
  SeededRng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix s = rng.normal_matrix(6, 1, 3.0);
    const auto j = static_cast<Eigen::Index>(rng.uniform_int(6));
    const Matrix fd = fd_gradient([&] { return sigmoid_loss(s.col(0), j); }, s);
    CHECK(rel_error(sigmoid_loss_grad(s.col(0), j), fd) < 1e-8);
  }
}

TEST_CASE("cross-entropy scalar examples") {
  CHECK(cross_entropy_loss(Vector::Constant(4, 0.3), 1, 1.0) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(cross_entropy_loss((Vector(3) << 50.0, 0.0, 0.0).finished(), 0, 1.0) < 1e-20);
  CHECK(cross_entropy_loss((Vector(2) << 2.0, 0.0).finished(), 0, 1.0) ==
        doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-15));
  CHECK_THROWS_AS(cross_entropy_loss(Vector::Zero(2), 0, 0.0), ContractError);
}

TEST_CASE("zero iterations leave experts bitwise unchanged") {
  const auto enc = small_encoder();
  TrainConfig cfg;
  cfg.iterations = 0;
  cfg.rank = 2;
  ExpertSet set = make_experts(enc, 3, cfg);
  for (int id : set.class_ids()) {
    SeededRng rng(static_cast<std::uint64_t>(id) + 1);
    set.set_adapter(id, random_lora(*enc, id, 2, rng));
  }
  const auto before = set.fingerprint();
  train_task_experts(set, blob_dataset(3, enc->embed_dim(), 5, 0.1, 1), cfg);
  CHECK(set.fingerprint() == before);
}

TEST_CASE("dataset class without an expert is a contract error") {
  const auto enc = small_encoder();
  TrainConfig cfg;
  cfg.rank = 2;
  ExpertSet set = make_experts(enc, 2, cfg);
  CHECK_THROWS_AS(train_task_experts(set, blob_dataset(3, enc->embed_dim(), 2, 0.1, 1), cfg), ContractError);
}

TEST_CASE("batched update touches only its subset") {
  const auto enc = small_encoder();
  TrainConfig cfg;
  cfg.rank = 2;
  cfg.data_batch = 8;
  ExpertSet set = make_experts(enc, 3, cfg);
  const SyntheticDataset ds = blob_dataset(3, enc->embed_dim(), 6, 0.1, 2);
  const DataBatch batch = draw_data_batch(ds, cfg, 0);
  std::map<int, AdamWState> opt;

  const ExpertSet before = set;
  CHECK(batched_expert_update(set, std::span<const int>{}, batch, cfg, 0, opt) == 0.0);
  CHECK(set.fingerprint() == before.fingerprint());

  const int one[] = {1};
  batched_expert_update(set, one, batch, cfg, 0, opt);
  CHECK(set.at(0).adapter.params == before.at(0).adapter.params);
  CHECK(set.at(2).adapter.params == before.at(2).adapter.params);
  CHECK_FALSE(set.at(1).adapter.params == before.at(1).adapter.params);

  // A subset that is already leased cannot be updated again.
  set.acquire(one);
  CHECK_THROWS_AS(batched_expert_update(set, one, batch, cfg, 1, opt), ContractError);
  set.release(one);
  CHECK_NOTHROW(batched_expert_update(set, one, batch, cfg, 1, opt));
}

TEST_CASE("expert gradients match finite differences") {
  const auto enc = small_encoder();
  for (LossVariant loss : {LossVariant::Sigmoid, LossVariant::CrossEntropy}) {
    TrainConfig cfg;
    cfg.rank = 2;
    cfg.data_batch = 6;
    cfg.loss = loss;
    ExpertSet set = make_experts(enc, 3, cfg);
    for (int id : set.class_ids()) {
      SeededRng rng(static_cast<std::uint64_t>(id) + 10);
      set.set_adapter(id, random_lora(*enc, id, 2, rng, 0.3));
    }
    const DataBatch batch = draw_data_batch(blob_dataset(3, enc->embed_dim(), 4, 0.2, 5), cfg, 0);
    const std::vector<int> subset{0, 1, 2};
    const ExpertBatchGradients g = expert_batch_gradients(set, subset, batch, cfg, 0);
    for (int c : subset) {
      Matrix& a = set.at(c).adapter.params.at(adapter_param_name(1, "A")).value;
      const Matrix fd = fd_gradient([&] { return expert_batch_gradients(set, subset, batch, cfg, 0).loss; }, a);
      CHECK(rel_error(g.grads.at(c).at(adapter_param_name(1, "A")), fd) < 1e-6);
    }
  }
}

TEST_CASE("sigmoid training is independent of the expert partition") {
  const auto enc = small_encoder();
  TrainConfig cfg;
  cfg.rank = 2;
  cfg.iterations = 5;
  cfg.data_batch = 12;
  const SyntheticDataset ds = blob_dataset(4, enc->embed_dim(), 8, 0.1, 3);
  std::vector<ExpertSet> runs;
  for (int eb : {1, 3, 0}) {
    cfg.expert_batch = eb;
    ExpertSet set = make_experts(enc, 4, cfg);
    train_task_experts(set, ds, cfg);
    runs.push_back(std::move(set));
  }
  CHECK(max_param_diff(runs[0], runs[1]) <= 1e-10);
  CHECK(max_param_diff(runs[0], runs[2]) <= 1e-10);
  CHECK(max_param_diff(runs[0], make_experts(enc, 4, cfg)) > 1e-4);
}

TEST_CASE("separable blobs reach high training accuracy") {
  const auto enc = small_encoder();
  TrainConfig cfg;
  cfg.rank = 4;
  cfg.iterations = 200;
  cfg.data_batch = 32;
  cfg.lr = 1e-2;
  ExpertSet set = make_experts(enc, 2, cfg);
  const SyntheticDataset ds = blob_dataset(2, enc->embed_dim(), 50, 0.1, 4);
  train_task_experts(set, ds, cfg);
  CHECK(training_accuracy(set, ds) >= 0.95);
}

TEST_CASE("template draws are deterministic and canonical without augmentation") {
  TrainConfig cfg;
  cfg.seed = 4;
  CHECK(template_draw(cfg, 8, 3, 2) == template_draw(cfg, 8, 3, 2));
  std::set<std::size_t> seen;
  for (int step = 0; step < 50; ++step) seen.insert(template_draw(cfg, 8, step, 1));
  CHECK(seen.size() > 1);
  cfg.template_augmentation = false;
  for (int step = 0; step < 10; ++step) CHECK(template_draw(cfg, 8, step, 1) == 0);
}
