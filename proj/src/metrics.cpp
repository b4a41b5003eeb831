#include "moder/metrics.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace moder {

namespace {

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

void require_entry(const AccuracyMatrix& a, int t, int i, const char* metric) {
  if (!a.has(t, i))
    throw ContractError(std::string(metric) + ": accuracy matrix entry (" + std::to_string(t) + ", " + std::to_string(i) +
                        ") is missing");
}

}  // namespace

AccuracyMatrix::AccuracyMatrix(int tasks) {
  if (tasks < 1) throw ContractError("AccuracyMatrix: need at least one task");
  values_ = Matrix::Constant(tasks, tasks, kMissing);
}

AccuracyMatrix::AccuracyMatrix(Matrix values) : values_(std::move(values)) {
  if (values_.rows() < 1 || values_.rows() != values_.cols()) throw DimensionError("AccuracyMatrix: must be square and non-empty");
  for (Eigen::Index r = 0; r < values_.rows(); ++r)
    for (Eigen::Index c = 0; c < values_.cols(); ++c) {
      const double v = values_(r, c);
      if (!std::isnan(v) && !(v >= 0.0 && v <= 1.0)) throw DomainError("AccuracyMatrix: accuracies must lie in [0, 1]");
    }
}

void AccuracyMatrix::set(int t, int i, double accuracy) {
  if (t < 0 || i < 0 || t >= tasks() || i >= tasks()) throw LookupError("AccuracyMatrix: index out of range");
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw DomainError("AccuracyMatrix: accuracies must lie in [0, 1]");
  values_(t, i) = accuracy;
}

bool AccuracyMatrix::has(int t, int i) const {
  return t >= 0 && i >= 0 && t < tasks() && i < tasks() && !std::isnan(values_(t, i));
}

bool AccuracyMatrix::complete() const { return !values_.array().isNaN().any(); }

std::string AccuracyMatrix::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "after_task";
  for (int i = 0; i < tasks(); ++i) os << ",task_" << i;
  os << '\n';
  for (int t = 0; t < tasks(); ++t) {
    os << t;
    for (int i = 0; i < tasks(); ++i) {
      os << ',';
      if (has(t, i)) os << values_(t, i);
    }
    os << '\n';
  }
  return os.str();
}

double faa(const AccuracyMatrix& a) {
  const int T = a.tasks();
  double sum = 0.0;
  for (int i = 0; i < T; ++i) {
    require_entry(a, T - 1, i, "faa");
    sum += a(T - 1, i);
  }
  return sum / T;
}

double ci_transfer(const AccuracyMatrix& a) {
  const int T = a.tasks();
  if (T < 2) throw UndefinedMetricError("ci_transfer: needs at least two tasks");
  double outer = 0.0;
  for (int t = 0; t + 1 < T; ++t) {
    double inner = 0.0;
    for (int i = t + 1; i < T; ++i) {
      require_entry(a, t, i, "ci_transfer");
      inner += a(t, i);
    }
    outer += inner / (T - 1 - t);
  }
  return outer / (T - 1);
}

MtilMetrics mtil_metrics(const AccuracyMatrix& a, bool inclusive_transfer) {
  const int T = a.tasks();
  if (T < 2) throw UndefinedMetricError("mtil_metrics: Transfer needs at least two tasks");
  MtilMetrics m;
  for (int i = 1; i < T; ++i) {
    double tr = 0.0;
    const int upto = inclusive_transfer ? i : i - 1;
    for (int t = 0; t <= upto; ++t) {
      require_entry(a, t, i, "mtil_metrics");
      tr += a(t, i);
    }
    m.transfer += tr / i;
  }
  m.transfer /= (T - 1);
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < T; ++i) {
      require_entry(a, t, i, "mtil_metrics");
      m.avg += a(t, i);
    }
  m.avg /= static_cast<double>(T) * T;
  m.last = faa(a);
  return m;
}

MetricsReport make_report(const AccuracyMatrix& a, bool mtil, bool inclusive_transfer) {
  MetricsReport r;
  r.protocol = mtil ? "mtil" : "class_il";
  const int T = a.tasks();
  r.faa = faa(a);
  for (int i = 0; i < T; ++i) r.final_row.push_back(a(T - 1, i));
  for (int i = 0; i < T; ++i) {
    if (i == 0) {
      r.unseen_column_mean.emplace_back();
      continue;
    }
    double s = 0.0;
    for (int t = 0; t < i; ++t) s += a(t, i);
    r.unseen_column_mean.emplace_back(s / i);
  }
  if (T >= 2) {
    if (mtil) {
      const MtilMetrics m = mtil_metrics(a, inclusive_transfer);
      r.transfer = m.transfer;
      r.avg = m.avg;
      r.last = m.last;
    } else {
      r.ci_transfer = ci_transfer(a);
    }
  }
  if (mtil && T < 2) r.last = r.faa;
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["protocol"] = r.protocol;
  j["faa"] = opt(r.faa);
  if (r.protocol == "class_il") {
    j["ci_transfer"] = opt(r.ci_transfer);
  } else {
    j["transfer"] = opt(r.transfer);
    j["avg"] = opt(r.avg);
    j["last"] = opt(r.last);
  }
  j["per_task"]["final_accuracy"] = r.final_row;
  nlohmann::json unseen = nlohmann::json::array();
  for (const auto& v : r.unseen_column_mean) unseen.push_back(opt(v));
  j["per_task"]["unseen_accuracy"] = unseen;
  j["config_hash"] = r.config_hash;
  j["seeds"] = r.seeds;
  return j;
}

}  // namespace moder
