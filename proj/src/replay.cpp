#include "moder/replay.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "moder/adamw.hpp"
#include "moder/denoiser.hpp"

namespace moder {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ContractError("NoiseSchedule: need at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ContractError("NoiseSchedule: betas must satisfy 0 < start <= end < 1");
  if (steps >= 2 && !(beta_start < beta_end)) throw ContractError("NoiseSchedule: betas must increase");
  NoiseSchedule s;
  double bar = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    const double beta = beta_start + frac * (beta_end - beta_start);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    bar *= 1.0 - beta;
    s.alpha_bars.push_back(bar);
  }
  return s;
}

NoiseSchedule DiffusionConfig::schedule() const {
  double start = beta_start, end = beta_end;
  if (scale_to_steps) {
    const double k = 1000.0 / steps;
    start *= k;
    end = std::min(end * k, 0.999);
  }
  return NoiseSchedule::linear(steps, start, end);
}

Matrix q_sample(const NoiseSchedule& schedule, const Matrix& x0, const Matrix& eps, int t) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw DimensionError("q_sample: shape mismatch");
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

Vector timestep_embedding(int t, int dim) {
  Vector e(dim);
  for (int i = 0; i < dim; ++i) {
    const int k = i / 2;
    const double freq = std::pow(10000.0, -2.0 * k / std::max(dim, 1));
    e(i) = (i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
  }
  return e;
}

int DiffusionGenerator::class_index(int class_id) const {
  auto it = std::lower_bound(class_ids.begin(), class_ids.end(), class_id);
  if (it == class_ids.end() || *it != class_id)
    throw LookupError("DiffusionGenerator: class " + std::to_string(class_id) + " is not part of task " +
                      std::to_string(task_id));
  return static_cast<int>(it - class_ids.begin());
}

DiffusionGenerator make_generator(std::vector<int> class_ids, int task_id, int dim, const DiffusionConfig& cfg,
                                  std::uint64_t seed) {
  if (class_ids.empty()) throw ContractError("make_generator: no classes");
  if (dim <= 0) throw ContractError("make_generator: dimension must be positive");
  if (cfg.layers < 2) throw ContractError("make_generator: need at least two layers");
  std::sort(class_ids.begin(), class_ids.end());
  if (std::adjacent_find(class_ids.begin(), class_ids.end()) != class_ids.end())
    throw ContractError("make_generator: duplicate class ids");

  DiffusionGenerator g;
  g.class_ids = std::move(class_ids);
  g.task_id = task_id;
  g.dim = dim;
  g.cond_dim = cfg.cond_dim;
  g.time_dim = cfg.time_dim;
  g.feature_scale = std::sqrt(static_cast<double>(dim));
  g.seed = seed;
  g.schedule = cfg.schedule();

  std::vector<int> widths{dim + cfg.cond_dim + cfg.time_dim};
  for (int l = 0; l + 1 < cfg.layers; ++l) widths.push_back(cfg.hidden);
  widths.push_back(dim);
  SeededRng rng(derive_seed(seed, {0x47454eULL}));
  g.net = make_mlp(widths, rng);
  g.net.add("class_embedding", rng.normal_matrix(static_cast<Eigen::Index>(g.class_ids.size()), cfg.cond_dim));
  return g;
}

namespace {

Matrix conditioning_rows(const DiffusionGenerator& gen, const std::vector<int>& steps) {
  Matrix out(static_cast<Eigen::Index>(steps.size()), gen.time_dim);
  for (std::size_t i = 0; i < steps.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = timestep_embedding(steps[i], gen.time_dim).transpose();
  return out;
}

Matrix one_hot(const std::vector<int>& indices, Eigen::Index classes) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(indices.size()), classes);
  for (std::size_t i = 0; i < indices.size(); ++i) m(static_cast<Eigen::Index>(i), indices[i]) = 1.0;
  return m;
}

}  // namespace

Matrix predict_noise(const DiffusionGenerator& gen, const Matrix& x_t, int class_index, int t) {
  const Eigen::Index n = x_t.rows();
  Matrix input(n, gen.dim + gen.cond_dim + gen.time_dim);
  input.leftCols(gen.dim) = x_t;
  input.middleCols(gen.dim, gen.cond_dim) = gen.net.value("class_embedding").row(class_index).replicate(n, 1);
  input.rightCols(gen.time_dim) = timestep_embedding(t, gen.time_dim).transpose().replicate(n, 1);
  return forward_mlp_batch(gen.net, input, Activation::Selu);
}

Var denoising_loss(Tape& tape, const DiffusionGenerator& gen, const Matrix& x_t, const std::vector<int>& class_indices,
                   const std::vector<int>& steps, const Matrix& eps) {
  const auto n = static_cast<std::size_t>(x_t.rows());
  if (class_indices.size() != n || steps.size() != n) throw DimensionError("denoising_loss: batch size mismatch");
  Var table = tape.parameter(gen.net, "class_embedding");
  Var cond = ag::matmul(tape.constant(one_hot(class_indices, table.rows())), table);
  Var input = ag::concat_cols({tape.constant(x_t), cond, tape.constant(conditioning_rows(gen, steps))});
  Var pred = forward_mlp(tape, gen.net, input, Activation::Selu);
  return ag::mse(pred, eps);
}

DiffusionGenerator train_generator(std::span<const LabeledEmbedding> features, int task_id, const DiffusionConfig& cfg,
                                   std::uint64_t seed, const GeneratorLossLog& log) {
  if (features.empty()) throw ContractError("train_generator: empty feature list");
  if (cfg.iterations < 0 || cfg.batch <= 0) throw ContractError("train_generator: invalid iteration or batch count");
  const auto dim = features.front().x.size();
  std::set<int> classes;
  for (const auto& f : features) {
    if (f.x.size() != dim) throw DimensionError("train_generator: features have mixed dimensions");
    classes.insert(f.class_id);
  }
  DiffusionGenerator gen =
      make_generator(std::vector<int>(classes.begin(), classes.end()), task_id, static_cast<int>(dim), cfg, seed);

  // Training runs at float precision; the tape loss is the double reference.
  DenoiserNet<float> net(gen.net);
  const AdamWConfig opt{cfg.lr, cfg.weight_decay};
  SeededRng rng(derive_seed(seed, {0x545241494eULL}));
  const int T = gen.schedule.steps();
  const auto b = static_cast<Eigen::Index>(cfg.batch);

  for (int it = 0; it < cfg.iterations; ++it) {
    MatrixF x_t(b, gen.dim);
    MatrixF eps(b, gen.dim);
    MatrixF time_rows(b, gen.time_dim);
    std::vector<int> cls(static_cast<std::size_t>(b));
    for (Eigen::Index r = 0; r < b; ++r) {
      const auto& f = features[rng.uniform_int(features.size())];
      const int t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(T)));
      const double ab = gen.schedule.alpha_bar(t);
      Vector e(gen.dim);
      for (Eigen::Index c = 0; c < gen.dim; ++c) e(c) = rng.normal();
      x_t.row(r) = (std::sqrt(ab) * gen.feature_scale * f.x + std::sqrt(1.0 - ab) * e).cast<float>().transpose();
      eps.row(r) = e.cast<float>().transpose();
      time_rows.row(r) = timestep_embedding(t, gen.time_dim).cast<float>().transpose();
      cls[static_cast<std::size_t>(r)] = gen.class_index(f.class_id);
    }
    const double value = net.loss_and_grad(x_t, cls, time_rows, eps);
    if (!std::isfinite(value)) throw DivergenceError("train_generator: non-finite loss at iteration " + std::to_string(it));
    net.adamw_step(opt);
    gen.final_loss = value;
    if (log) log(it, value);
  }
  if (!net.all_finite()) throw DivergenceError("train_generator: parameters became non-finite");
  // Untrained nets keep their double initialization.
  if (cfg.iterations > 0) net.store(gen.net);
  return gen;
}

std::vector<Embedding> sample(const DiffusionGenerator& gen, int class_id, int n, std::uint64_t seed) {
  const int idx = gen.class_index(class_id);
  if (n < 0) throw ContractError("sample: negative sample count");
  std::vector<Embedding> out;
  if (n == 0) return out;

  const DenoiserNet<float> net(gen.net);
  const std::vector<int> cls(static_cast<std::size_t>(n), idx);
  SeededRng rng(seed);
  const int T = gen.schedule.steps();
  Matrix x = rng.normal_matrix(n, gen.dim);
  for (int t = T; t >= 1; --t) {
    const double beta = gen.schedule.beta(t);
    const double ab = gen.schedule.alpha_bar(t);
    const MatrixF time_rows = timestep_embedding(t, gen.time_dim).cast<float>().transpose().replicate(n, 1);
    const Matrix eps_hat = net.predict(x.cast<float>(), cls, time_rows).cast<double>();
    Matrix mean = (x - (beta / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(gen.schedule.alpha(t));
    if (t > 1) {
      // Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
      const double ab_prev = gen.schedule.alpha_bar(t - 1);
      const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta);
      x = mean + sigma * rng.normal_matrix(n, gen.dim);
    } else {
      x = std::move(mean);
    }
  }
  if (!x.allFinite()) throw DivergenceError("sample: non-finite sample");
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(l2_normalize(x.row(i).transpose()));
  return out;
}

std::uint64_t synthetic_chunk_seed(std::uint64_t seed, int task_id, int class_id, int chunk) {
  return derive_seed(seed, {0x53594eULL, static_cast<std::uint64_t>(task_id), static_cast<std::uint64_t>(class_id),
                            static_cast<std::uint64_t>(chunk)});
}

SyntheticDataset build_synthetic_dataset(std::span<const DiffusionGenerator* const> generators, int per_class, int batch,
                                         std::uint64_t seed) {
  if (per_class < 0 || batch <= 0) throw ContractError("build_synthetic_dataset: invalid per-class or batch size");
  SyntheticDataset ds;
  for (const DiffusionGenerator* g : generators) {
    if (g == nullptr) throw ContractError("build_synthetic_dataset: null generator");
    for (int c : g->class_ids)
      if (!ds.per_class_counts.emplace(c, 0).second)
        throw ContractError("build_synthetic_dataset: class " + std::to_string(c) + " covered by more than one generator");
    ds.generator_tasks.push_back(g->task_id);
  }
  for (const DiffusionGenerator* g : generators) {
    for (int c : g->class_ids) {
      for (auto& x : synthetic_class_samples(*g, c, per_class, batch, seed)) ds.items.push_back({std::move(x), c});
      ds.per_class_counts[c] = per_class;
    }
  }
  shuffle_synthetic(ds, seed);
  return ds;
}

std::vector<Embedding> synthetic_class_samples(const DiffusionGenerator& gen, int class_id, int per_class, int batch,
                                               std::uint64_t seed) {
  if (per_class < 0 || batch <= 0) throw ContractError("synthetic_class_samples: invalid per-class or batch size");
  std::vector<Embedding> out;
  out.reserve(static_cast<std::size_t>(per_class));
  for (int chunk = 0, drawn = 0; drawn < per_class; ++chunk) {
    const int n = std::min(batch, per_class - drawn);
    for (auto& x : sample(gen, class_id, n, synthetic_chunk_seed(seed, gen.task_id, class_id, chunk))) out.push_back(std::move(x));
    drawn += n;
  }
  return out;
}

void shuffle_synthetic(SyntheticDataset& ds, std::uint64_t seed) {
  SeededRng shuffler(derive_seed(seed, {0x5348554646ULL}));
  shuffler.shuffle(ds.items);
}

}  // namespace moder
