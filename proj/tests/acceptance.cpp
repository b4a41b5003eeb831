// Acceptance checks. One PASS/FAIL line per criterion; every tolerance and
// time budget is a named constant below. Exit status is the number of failures.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "moder/cli.hpp"
#include "support.hpp"

using namespace moder;
using namespace moder::testing;

namespace {

constexpr double kGradRelTol = 1e-4;
constexpr int kGradInstances = 20;
constexpr double kGradSeconds = 30.0;
constexpr double kPartitionTol = 1e-10;
constexpr double kCeDivergence = 1e-3;
constexpr double kPartitionSeconds = 120.0;
constexpr int kForgeHubs = 100;
constexpr double kForgeTol = 1e-10;
constexpr double kWeightSumTol = 1e-12;
constexpr double kReplayMeanTol = 0.15;
constexpr double kStandardErrors = 3.0;
constexpr double kReplaySeconds = 180.0;
constexpr int kMetricMatrices = 20;
constexpr double kMetricTol = 1e-12;
constexpr double kEndToEndSeconds = 600.0;
constexpr double kAblationTol = 1e-12;
constexpr int kPersistenceHubs = 100;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Gradient of a scalar function of one leaf, taken from the tape.
Matrix tape_gradient(const std::function<Var(Tape&, const Var&)>& f, const Matrix& x) {
  Tape tape;
  const Var leaf = tape.leaf(x, "x");
  return tape.backward(f(tape, leaf)).at("x");
}

double worst_leaf_error(const std::function<Var(Tape&, const Var&)>& f, Matrix x) {
  const Matrix analytic = tape_gradient(f, x);
  const Matrix numeric = fd_gradient(
      [&] {
        Tape tape;
        return f(tape, tape.leaf(x, "x")).value()(0, 0);
      },
      x);
  return rel_error(analytic, numeric);
}

// 1. Analytic gradients agree with central differences.
void gradients(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  SeededRng rng(101);
  double worst_sig = 0.0, worst_ce = 0.0, worst_enc = 0.0, worst_diff = 0.0;

  for (int i = 0; i < kGradInstances; ++i) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.uniform_int(5));
    const Eigen::Index c = 2 + static_cast<Eigen::Index>(rng.uniform_int(6));
    Matrix signs = -Matrix::Ones(n, c);
    std::vector<int> labels;
    for (Eigen::Index r = 0; r < n; ++r) {
      labels.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c))));
      signs(r, labels.back()) = 1.0;
    }
    const Matrix sims = rng.normal_matrix(n, c, 3.0);
    worst_sig = std::max(worst_sig, worst_leaf_error([&](Tape&, const Var& s) { return ag::sigmoid_loss(s, signs); }, sims));
    const double temp = 0.5 + rng.uniform();
    worst_ce = std::max(worst_ce,
                        worst_leaf_error([&](Tape&, const Var& s) { return ag::cross_entropy(s, labels, temp); }, sims));
  }

  const ReferenceEncoder enc(small_encoder_config(202));
  for (int i = 0; i < kGradInstances; ++i) {
    const bool vera = i % 2 == 1;
    AdapterModule a = vera ? make_vera_adapter(enc, 0, make_vera_basis(enc, 2, rng.next_u64())) : random_lora(enc, 0, 2, rng);
    for (auto& [name, p] : a.params) p.value = rng.normal_matrix(p.value.rows(), p.value.cols(), 0.3);
    const Vector pooled = enc.pool(random_name(rng));
    const Matrix probe = rng.normal_matrix(1, enc.embed_dim());
    const double alpha = 0.2 + 0.8 * rng.uniform();
    auto loss = [&] {
      Tape tape;
      return ag::sum(ag::hadamard(encode_on_tape(tape, enc, pooled, a, alpha, "e."), tape.constant(probe))).value()(0, 0);
    };
    Tape tape;
    const Gradients g =
        tape.backward(ag::sum(ag::hadamard(encode_on_tape(tape, enc, pooled, a, alpha, "e."), tape.constant(probe))));
    for (auto& [name, p] : a.params) worst_enc = std::max(worst_enc, rel_error(g.at("e." + name), fd_gradient(loss, p.value)));
  }

  DiffusionConfig dc;
  dc.steps = 50;
  dc.hidden = 10;
  dc.layers = 3;
  dc.cond_dim = 3;
  dc.time_dim = 4;
  for (int i = 0; i < kGradInstances; ++i) {
    DiffusionGenerator gen = make_generator({1, 4, 6}, 0, 6, dc, rng.next_u64());
    const int n = 5;
    const Matrix x_t = rng.normal_matrix(n, 6), eps = rng.normal_matrix(n, 6);
    std::vector<int> cls, steps;
    for (int r = 0; r < n; ++r) {
      cls.push_back(static_cast<int>(rng.uniform_int(3)));
      steps.push_back(1 + static_cast<int>(rng.uniform_int(50)));
    }
    Tape tape;
    const Gradients g = tape.backward(denoising_loss(tape, gen, x_t, cls, steps, eps));
    auto loss = [&] {
      Tape t;
      return denoising_loss(t, gen, x_t, cls, steps, eps).value()(0, 0);
    };
    for (auto& [name, p] : gen.net) worst_diff = std::max(worst_diff, rel_error(g.at(name), fd_gradient(loss, p.value)));
  }

  const double secs = seconds_since(t0);
  o.detail << "max rel err: sigmoid " << worst_sig << ", ce " << worst_ce << ", encoder " << worst_enc << ", diffusion "
           << worst_diff << " (" << kGradInstances << " instances each, tol " << kGradRelTol << "); " << secs << " s";
  o.require(worst_sig < kGradRelTol && worst_ce < kGradRelTol && worst_enc < kGradRelTol && worst_diff < kGradRelTol,
            "gradient tolerance");
  o.require(secs < kGradSeconds, "time budget");
}

SyntheticDataset toy_blobs(int classes, int dim, int per_class, std::uint64_t seed) {
  SeededRng rng(seed);
  SyntheticDataset ds;
  for (int c = 0; c < classes; ++c) {
    const Vector mean = l2_normalize(rng.normal_vector(dim));
    for (int i = 0; i < per_class; ++i) ds.items.push_back({l2_normalize(mean + 0.2 * rng.normal_vector(dim)), c});
    ds.per_class_counts[c] = per_class;
  }
  return ds;
}

ExpertSet trained_experts(const std::shared_ptr<const ReferenceEncoder>& enc, const SyntheticDataset& ds,
                          const TrainConfig& cfg) {
  ExpertSet set(enc, default_templates(4));
  for (int c = 0; c < 6; ++c)
    set.add_expert(c, word_pool()[static_cast<std::size_t>(2 * c)] + " " + word_pool()[static_cast<std::size_t>(2 * c + 1)],
                   0, cfg, 5);
  train_task_experts(set, ds, cfg);
  return set;
}

double max_adapter_diff(const ExpertSet& a, const ExpertSet& b) {
  double d = 0.0;
  for (int id : a.class_ids())
    for (const auto& [name, p] : a.at(id).adapter.params)
      d = std::max(d, (p.value - b.at(id).adapter.params.value(name)).cwiseAbs().maxCoeff());
  return d;
}

// 2. Sigmoid training does not depend on how experts are batched; CE does.
void partition(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto enc = std::make_shared<const ReferenceEncoder>(small_encoder_config(303));
  const SyntheticDataset ds = toy_blobs(6, enc->embed_dim(), 10, 4);
  TrainConfig cfg;
  cfg.rank = 2;
  cfg.iterations = 30;
  cfg.data_batch = 24;
  cfg.lr = 1e-2;
  std::vector<ExpertSet> sig, ce;
  for (int eb : {1, 2, 0}) {
    cfg.expert_batch = eb;
    cfg.loss = LossVariant::Sigmoid;
    sig.push_back(trained_experts(enc, ds, cfg));
    cfg.loss = LossVariant::CrossEntropy;
    ce.push_back(trained_experts(enc, ds, cfg));
  }
  const double d12 = max_adapter_diff(sig[0], sig[1]), d1all = max_adapter_diff(sig[0], sig[2]);
  const double dce = max_adapter_diff(ce[0], ce[2]);
  const double secs = seconds_since(t0);
  o.detail << "sigmoid max diff E_b 1 vs 2: " << d12 << ", 1 vs all: " << d1all << " (tol " << kPartitionTol
           << "); cross-entropy 1 vs all: " << dce << " (must exceed " << kCeDivergence << "); " << secs << " s";
  o.require(d12 <= kPartitionTol && d1all <= kPartitionTol, "sigmoid partition invariance");
  o.require(dce > kCeDivergence, "cross-entropy divergence");
  o.require(secs < kPartitionSeconds, "time budget");
}

// 3. Forging identities over random hubs.
void forging(Outcome& o) {
  const auto enc = std::make_shared<const ReferenceEncoder>(small_encoder_config(404));
  SeededRng rng(405);
  double worst_k1 = 0.0, worst_sum = 0.0;
  bool alpha0_exact = true;
  for (int h = 0; h < kForgeHubs; ++h) {
    const FoundationalHub hub = random_hub(enc, rng, 2 + static_cast<int>(rng.uniform_int(7)));
    const std::string name = random_name(rng);
    const ClassPrompt prompt{-1, name};

    ForgeConfig one;
    one.k = 1;
    one.alpha = 1.0;
    const int top = top_k(hub, prompt, 1)[0].class_id;
    const ForgedPrototype f1 = forge(hub, name, one);
    worst_k1 = std::max(worst_k1, (f1.embedding - encode(*enc, prompt, &hub.entry(top).task_vector, 1.0)).cwiseAbs().maxCoeff());

    ForgeConfig zero;
    zero.alpha = 0.0;
    zero.k = 1 + static_cast<int>(rng.uniform_int(hub.size()));
    const ForgedPrototype f0 = forge(hub, name, zero);
    // Effective weights theta0 + 0 * tau are theta0 exactly.
    TaskVector effective = f0.merged;
    effective *= f0.report.alpha;
    for (const auto& d : effective.deltas) alpha0_exact = alpha0_exact && (d.array() == 0.0).all();
    alpha0_exact = alpha0_exact && f0.embedding == encode_zero_shot(*enc, prompt);

    ForgeConfig mixed;
    mixed.k = 1 + static_cast<int>(rng.uniform_int(hub.size()));
    mixed.alpha = rng.uniform();
    mixed.temperature = 0.2 + 2.0 * rng.uniform();
    double s = 0.0;
    for (double w : forge(hub, name, mixed).report.weights) s += w;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  o.detail << kForgeHubs << " hubs: K=1,alpha=1 max diff " << worst_k1 << " (tol " << kForgeTol << "); alpha=0 exact "
           << (alpha0_exact ? "yes" : "no") << "; weight-sum max dev " << worst_sum << " (tol " << kWeightSumTol << ")";
  o.require(worst_k1 <= kForgeTol, "K=1 identity");
  o.require(alpha0_exact, "alpha=0 identity");
  o.require(worst_sum <= kWeightSumTol, "softmax normalization");
}

// 4. Generative replay recovers class means; the forward process has the
// closed-form marginal.
void replay(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  EncoderConfig ec = small_encoder_config(505);
  ec.embed_dim = 8;
  const ReferenceEncoder enc(ec);
  WorldConfig wc;
  wc.num_classes = 2;
  wc.num_families = 2;
  const SyntheticWorld world = generate_world(wc, enc, 506);

  std::vector<LabeledEmbedding> train;
  std::vector<Vector> true_means;
  for (int c = 0; c < 2; ++c) {
    for (const auto& x : sample_class(world, c, 500, 600 + static_cast<std::uint64_t>(c))) train.push_back({x, c});
    // Monte-Carlo estimate of the class distribution mean.
    Vector m = Vector::Zero(8);
    const int draws = 200000;
    for (const auto& x : sample_class(world, c, draws, 700 + static_cast<std::uint64_t>(c))) m += x;
    true_means.push_back(m / draws);
  }

  const DiffusionConfig dc;
  const DiffusionGenerator gen = train_generator(train, 0, dc, 507);
  double worst_mean = 0.0;
  for (int c = 0; c < 2; ++c) {
    Vector m = Vector::Zero(8);
    const auto s = sample(gen, c, 1000, 508 + static_cast<std::uint64_t>(c));
    for (const auto& x : s) m += x;
    worst_mean = std::max(worst_mean, (m / 1000.0 - true_means[static_cast<std::size_t>(c)]).norm());
  }

  // Forward marginal along the class-0 mean direction: E[u . x_t] = sqrt(abar_t) E[u . x_0].
  const NoiseSchedule sched = dc.schedule();
  const Vector u = l2_normalize(true_means[0]);
  const auto x0s = sample_class(world, 0, 20000, 509);
  Matrix x0(static_cast<Eigen::Index>(x0s.size()), 8);
  for (std::size_t i = 0; i < x0s.size(); ++i) x0.row(static_cast<Eigen::Index>(i)) = x0s[i].transpose();
  SeededRng noise(510);
  int marginal_fail = 0;
  std::ostringstream zs;
  for (int t : {1, dc.steps / 2, dc.steps}) {
    const Vector proj = q_sample(sched, x0, noise.normal_matrix(x0.rows(), 8), t) * u;
    const double mean = proj.mean();
    const double se = std::sqrt((proj.array() - mean).square().sum() / static_cast<double>(proj.size() - 1) /
                                static_cast<double>(proj.size()));
    const double z = (mean - std::sqrt(sched.alpha_bar(t)) * true_means[0].dot(u)) / se;
    zs << " t=" << t << ":" << z;
    marginal_fail += std::abs(z) > kStandardErrors;
  }
  const double secs = seconds_since(t0);
  o.detail << "max |sample mean - true mean| " << worst_mean << " (tol " << kReplayMeanTol << "); forward z-scores" << zs.str()
           << " (tol " << kStandardErrors << "); " << secs << " s";
  o.require(worst_mean <= kReplayMeanTol, "replay mean");
  o.require(marginal_fail == 0, "forward marginal");
  o.require(secs < kReplaySeconds, "time budget");
}

// 5. Metric implementations against naive oracles and hand cases.
void metrics(Outcome& o) {
  SeededRng rng(606);
  double worst = 0.0;
  for (int i = 0; i < kMetricMatrices; ++i) {
    const Matrix m = random_accuracy_matrix(rng, 2 + static_cast<int>(rng.uniform_int(7)));
    const AccuracyMatrix a(m);
    const MtilMetrics mm = mtil_metrics(a);
    const NaiveMtil nm = naive_mtil(m);
    for (double d : {faa(a) - naive_faa(m), ci_transfer(a) - naive_ci_transfer(m), mm.transfer - nm.transfer,
                     mm.avg - nm.avg, mm.last - nm.last})
      worst = std::max(worst, std::abs(d));
  }
  for (const auto& c : hand_cases()) {
    const AccuracyMatrix a(c.a);
    const MtilMetrics mm = mtil_metrics(a);
    for (double d : {faa(a) - c.faa, ci_transfer(a) - c.ci_transfer, mm.transfer - c.transfer, mm.avg - c.avg,
                     mm.last - c.last})
      worst = std::max(worst, std::abs(d));
  }
  o.detail << kMetricMatrices << " random matrices and " << hand_cases().size() << " hand cases: max abs diff " << worst
           << " (tol " << kMetricTol << ")";
  o.require(worst <= kMetricTol, "metric agreement");
}

// 6. Full runs beat the zero-shot baseline.
void end_to_end(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed : {1992ULL, 1996ULL, 1997ULL}) {
    RunConfig cfg;
    cfg.pipeline.seed = seed;
    const PipelineResult r = run_pipeline(cfg.pipeline);
    const double faa_v = *r.report.faa, zfaa = *r.zero_shot_report.faa;
    const double cit = *r.report.ci_transfer, zcit = *r.zero_shot_report.ci_transfer;
    o.detail << "seed " << seed << ": FAA " << faa_v << " vs " << zfaa << ", CI-transfer " << cit << " vs " << zcit << "; ";
    o.require(faa_v >= zfaa, "FAA seed " + std::to_string(seed));
    o.require(cit >= zcit, "CI-transfer seed " + std::to_string(seed));
  }
  const double secs = seconds_since(t0);
  o.detail << secs << " s";
  o.require(secs < kEndToEndSeconds, "time budget");
}

// 7. Ablation tables render; alpha = 0 reproduces zero-shot.
void ablation(Outcome& o) {
  const RunConfig base = tiny_run_config();
  const AblationTable loss = ablate(base, AblationAxis::Loss, {"sigmoid", "cross_entropy"});
  const AblationTable aug = ablate(base, AblationAxis::TemplateAug, {"true", "false"});
  const AblationTable alpha = ablate(base, AblationAxis::Alpha, {"0", "0.5"});
  for (const AblationTable* t : {&loss, &aug, &alpha}) {
    const std::string md = t->to_markdown();
    o.require(t->rows.size() == 2, axis_name(t->axis) + " row count");
    o.require(md.find("| zero-shot") != std::string::npos, axis_name(t->axis) + " zero-shot row");
    for (const auto& row : t->rows) o.require(md.find(row.value) != std::string::npos, axis_name(t->axis) + " row " + row.value);
  }
  const MetricsReport& r0 = alpha.rows[0].report;
  const double dfaa = std::abs(*r0.faa - *alpha.zero_shot.faa);
  const double dcit = std::abs(*r0.ci_transfer - *alpha.zero_shot.ci_transfer);
  o.detail << "tables for loss, template_aug, alpha; alpha=0 vs zero-shot: |dFAA| " << dfaa << ", |dCI| " << dcit
           << " (tol " << kAblationTol << ")";
  o.require(dfaa <= kAblationTol && dcit <= kAblationTol, "alpha=0 reduction");
}

// 8. Hub persistence.
void persistence(Outcome& o) {
  const auto enc = std::make_shared<const ReferenceEncoder>(small_encoder_config(808));
  const auto other = std::make_shared<const ReferenceEncoder>(small_encoder_config(809));
  SeededRng rng(810);
  int exact = 0, corrupt_rejected = 0, foreign_rejected = 0;
  for (int h = 0; h < kPersistenceHubs; ++h) {
    const FoundationalHub hub = random_hub(enc, rng, 1 + static_cast<int>(rng.uniform_int(6)));
    const auto bytes = serialize(hub);
    const FoundationalHub back = deserialize(bytes, enc);
    bool same = back.size() == hub.size() && back.hub_seed() == hub.hub_seed();
    for (std::size_t i = 0; same && i < hub.size(); ++i) {
      const HubEntry& a = hub.entries()[i];
      const HubEntry& b = back.entries()[i];
      same = a.class_id == b.class_id && a.class_name == b.class_name && a.task_id == b.task_id &&
             b.zero_shot == a.zero_shot.cast<float>().cast<double>();
      for (const auto& [name, p] : a.adapter.params)
        same = same && b.adapter.params.value(name) == p.value.cast<float>().cast<double>();
    }
    exact += same && serialize(back) == bytes;

    auto damaged = bytes;
    damaged[static_cast<std::size_t>(rng.uniform_int(damaged.size()))] ^= static_cast<unsigned char>(1u << rng.uniform_int(8));
    try {
      (void)deserialize(damaged, enc);
    } catch (const FormatError&) {
      ++corrupt_rejected;
    }
    try {
      (void)deserialize(bytes, other);
    } catch (const FormatError&) {
      ++foreign_rejected;
    }
  }
  o.detail << kPersistenceHubs << " hubs: float32-exact round trips " << exact << ", corrupted rejected " << corrupt_rejected
           << ", wrong encoder rejected " << foreign_rejected;
  o.require(exact == kPersistenceHubs, "round trip");
  o.require(corrupt_rejected == kPersistenceHubs, "corruption");
  o.require(foreign_rejected == kPersistenceHubs, "encoder fingerprint");
}

// 9. Identical configs give identical results.
void reproducibility(Outcome& o) {
  const RunConfig cfg = tiny_run_config();
  TempDir a("acc-a"), b("acc-b");
  std::ostringstream log;
  const auto ma = comparable_metrics(cmd_run(cfg, a.path(), log));
  const auto mb = comparable_metrics(cmd_run(cfg, b.path(), log));
  o.detail << "two runs, comparable metrics " << (ma == mb ? "equal" : "differ");
  o.require(ma == mb, "metrics equality");
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, void (*)(Outcome&)>> criteria{
      {"gradient checks", gradients},       {"expert partition", partition}, {"forging identities", forging},
      {"generative replay", replay},        {"metrics", metrics},            {"end-to-end vs zero-shot", end_to_end},
      {"ablation tables", ablation},        {"hub persistence", persistence}, {"reproducibility", reproducibility}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first << "): " << o.detail.str()
              << std::endl;
  }
  return failures;
}
