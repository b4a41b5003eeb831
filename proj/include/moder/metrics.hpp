#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moder/numerics.hpp"

namespace moder {

/// A(t, i): accuracy on task i's test set after training task t (0-based).
/// Entries that have not been evaluated are NaN.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(int tasks);
  explicit AccuracyMatrix(Matrix values);

  int tasks() const { return static_cast<int>(values_.rows()); }
  double operator()(int t, int i) const { return values_(t, i); }
  void set(int t, int i, double accuracy);
  bool has(int t, int i) const;
  bool complete() const;
  const Matrix& values() const { return values_; }

  /// Header "after_task,task_0,...", one row per t; missing entries empty.
  std::string to_csv() const;

 private:
  Matrix values_;
};

/// Mean of the final row.
double faa(const AccuracyMatrix& a);

/// Mean over t < T-1 of the mean of A(t, i) over i > t. Needs T >= 2.
double ci_transfer(const AccuracyMatrix& a);

struct MtilMetrics {
  double transfer = 0.0;
  double avg = 0.0;
  double last = 0.0;
};

/// Transfer = mean over i >= 1 of TR_i, TR_i = mean of A(t, i) over t < i.
/// With `inclusive_transfer` the diagonal term t = i joins the sum while the
/// divisor stays i (number of earlier tasks).
MtilMetrics mtil_metrics(const AccuracyMatrix& a, bool inclusive_transfer = false);

struct MetricsReport {
  std::string protocol;  // "class_il" or "mtil"
  std::optional<double> faa;
  std::optional<double> ci_transfer;
  std::optional<double> transfer;
  std::optional<double> avg;
  std::optional<double> last;
  /// Per-task breakdowns: final-row accuracies and, per task, the mean of its
  /// not-yet-seen column entries (absent for the first task).
  std::vector<double> final_row;
  std::vector<std::optional<double>> unseen_column_mean;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
};

MetricsReport make_report(const AccuracyMatrix& a, bool mtil, bool inclusive_transfer = false);
nlohmann::json to_json(const MetricsReport& report);

}  // namespace moder
