#pragma once

// Oracles and fixtures shared by the unit tests and the acceptance binary.
// Everything here is written independently of the library code it checks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "moder/config.hpp"
#include "moder/encoder.hpp"
#include "moder/hub.hpp"
#include "moder/metrics.hpp"
#include "moder/rng.hpp"

namespace moder::testing {

/// Central differences of f at every entry of x (x is restored on return).
inline Matrix fd_gradient(const std::function<double()>& f, Matrix& x, double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = f();
    x.data()[i] = saved - h;
    const double down = f();
    x.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// |a - b| / max(|a|, |b|) over the whole gradient; 0 when both vanish.
inline double rel_error(const Matrix& analytic, const Matrix& numeric) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  if (scale < 1e-12) return (analytic - numeric).norm();
  return (analytic - numeric).norm() / scale;
}

inline double naive_faa(const Matrix& a) {
  const auto T = a.rows();
  double s = 0.0;
  for (Eigen::Index i = 0; i < T; ++i) s += a(T - 1, i);
  return s / static_cast<double>(T);
}

inline double naive_ci_transfer(const Matrix& a) {
  const auto T = a.rows();
  double outer = 0.0;
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    double inner = 0.0;
    for (Eigen::Index i = t + 1; i < T; ++i) inner += a(t, i);
    outer += inner / static_cast<double>(T - 1 - t);
  }
  return outer / static_cast<double>(T - 1);
}

struct NaiveMtil {
  double transfer, avg, last;
};

inline NaiveMtil naive_mtil(const Matrix& a) {
  const auto T = a.rows();
  double transfer = 0.0;
  for (Eigen::Index i = 1; i < T; ++i) {
    double col = 0.0;
    for (Eigen::Index t = 0; t < i; ++t) col += a(t, i);
    transfer += col / static_cast<double>(i);
  }
  double all = 0.0;
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index i = 0; i < T; ++i) all += a(t, i);
  return {transfer / static_cast<double>(T - 1), all / static_cast<double>(T * T), naive_faa(a)};
}

/// 3x3 matrices with metrics worked out by hand.
struct HandCase {
  Matrix a;
  double faa, ci_transfer, transfer, avg, last;
};

inline std::vector<HandCase> hand_cases() {
  std::vector<HandCase> cases(3);
  cases[0].a = (Matrix(3, 3) << 0.9, 0.3, 0.2, 0.8, 0.85, 0.4, 0.7, 0.75, 0.95).finished();
  // FAA (0.7+0.75+0.95)/3; CI ((0.3+0.2)/2 + 0.4)/2; TR (0.3 + (0.2+0.4)/2)/2; Avg 5.85/9.
  cases[0].faa = 0.8, cases[0].ci_transfer = 0.325, cases[0].transfer = 0.3, cases[0].avg = 0.65, cases[0].last = 0.8;
  cases[1].a = (Matrix(3, 3) << 1.0, 0.5, 0.0, 1.0, 1.0, 0.25, 0.5, 1.0, 1.0).finished();
  // FAA 2.5/3; CI (0.25 + 0.25)/2; TR (0.5 + 0.125)/2; Avg 6.25/9.
  cases[1].faa = 2.5 / 3.0, cases[1].ci_transfer = 0.25, cases[1].transfer = 0.3125, cases[1].avg = 6.25 / 9.0,
  cases[1].last = 2.5 / 3.0;
  cases[2].a = (Matrix(3, 3) << 0.2, 0.4, 0.6, 0.3, 0.5, 0.7, 0.1, 0.9, 0.8).finished();
  // FAA 1.8/3; CI (0.5 + 0.7)/2; TR (0.4 + 0.65)/2; Avg 4.5/9.
  cases[2].faa = 0.6, cases[2].ci_transfer = 0.6, cases[2].transfer = 0.525, cases[2].avg = 0.5, cases[2].last = 0.6;
  return cases;
}

inline Matrix random_accuracy_matrix(SeededRng& rng, int tasks) {
  Matrix a(tasks, tasks);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.uniform();
  return a;
}

/// Small encoder that keeps gradient checks and hub sweeps fast.
inline EncoderConfig small_encoder_config(std::uint64_t seed = 7) {
  EncoderConfig c;
  c.vocab_size = 97;
  c.token_dim = 12;
  c.hidden_dim = 16;
  c.embed_dim = 10;
  c.seed = seed;
  return c;
}

inline const std::vector<std::string>& word_pool() {
  static const std::vector<std::string> words{
      "red",   "green", "blue",  "small",  "large", "fox",   "heron", "maple", "violin", "anchor",
      "comet", "tiger", "lemon", "quartz", "river", "otter", "cedar", "falcon", "harbor", "prism"};
  return words;
}

inline std::string random_name(SeededRng& rng) {
  const auto& w = word_pool();
  return w[rng.uniform_int(w.size())] + " " + w[rng.uniform_int(w.size())];
}

/// LoRA adapter with every factor drawn N(0, scale^2), so the displacement is nonzero.
inline AdapterModule random_lora(const ReferenceEncoder& enc, int class_id, int rank, SeededRng& rng,
                                 double scale = 0.2) {
  AdapterModule a = make_lora_adapter(enc, class_id, rank, rng.next_u64());
  for (auto& [name, p] : a.params) p.value = rng.normal_matrix(p.value.rows(), p.value.cols(), scale);
  return a;
}

/// Hub with `n` entries of random LoRA experts under distinct class ids and names.
inline FoundationalHub random_hub(std::shared_ptr<const ReferenceEncoder> enc, SeededRng& rng, int n, int rank = 2) {
  FoundationalHub hub(enc, rng.next_u64());
  std::vector<std::string> used;
  for (int i = 0; i < n; ++i) {
    std::string name;
    do {
      name = random_name(rng);
    } while (std::find(used.begin(), used.end(), name) != used.end());
    used.push_back(name);
    const int id = 3 * i + static_cast<int>(rng.uniform_int(3));
    hub.insert(id, name, random_lora(*enc, id, rank, rng), static_cast<int>(rng.uniform_int(4)));
  }
  return hub;
}

/// A few-second end-to-end configuration: 3 tasks of 2 classes.
inline RunConfig tiny_run_config() {
  RunConfig c;
  PipelineConfig& p = c.pipeline;
  p.encoder = small_encoder_config();
  p.encoder.embed_dim = 16;
  p.world.num_classes = 6;
  p.world.num_families = 3;
  p.stream.tasks = 3;
  p.stream.classes_per_task = 2;
  p.stream.train_per_class = 40;
  p.stream.test_per_class = 20;
  p.diffusion.steps = 10;
  p.diffusion.hidden = 32;
  p.diffusion.layers = 3;
  p.diffusion.cond_dim = 4;
  p.diffusion.time_dim = 4;
  p.diffusion.iterations = 40;
  p.diffusion.batch = 32;
  p.synthetic_per_class = 30;
  p.synthetic_batch = 16;
  p.train.iterations = 15;
  p.train.data_batch = 16;
  p.train.rank = 2;
  p.template_count = 4;
  p.seed = 11;
  return c;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    SeededRng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(stamp));
    path_ = std::filesystem::temp_directory_path() / ("moder-" + tag + "-" + std::to_string(rng.next_u64() % 1000000007));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace moder::testing
