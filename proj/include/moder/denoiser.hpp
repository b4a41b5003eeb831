#pragma once

#include <vector>

#include "moder/adamw.hpp"
#include "moder/numerics.hpp"
#include "moder/params.hpp"

namespace moder {

/// Dense copy of a generator's epsilon-net at precision Scalar with a
/// hand-written backward pass. Training and sampling run through this type;
/// the tape version of the loss is the reference it is tested against.
/// Input rows are [x_t | class embedding | time embedding]; hidden layers use
/// SELU and the last layer is linear.
template <typename Scalar>
class DenoiserNet {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  /// Reads "layer<l>.weight/bias" and "class_embedding" from `params`.
  explicit DenoiserNet(const ParamSet& params);

  /// Writes the current values back into `params` (shapes must match).
  void store(ParamSet& params) const;

  int dim() const { return static_cast<int>(weights_.back().rows()); }
  int cond_dim() const { return static_cast<int>(embedding_.cols()); }

  /// Predicted noise for rows of x_t, with per-row class indices and
  /// precomputed time-embedding rows.
  Mat predict(const Mat& x_t, const std::vector<int>& class_indices, const Mat& time_rows) const;

  /// Mean squared error against `eps`; fills the gradient buffers.
  Scalar loss_and_grad(const Mat& x_t, const std::vector<int>& class_indices, const Mat& time_rows, const Mat& eps);

  /// Gradients of the last loss_and_grad call, keyed like the ParamSet.
  Gradients gradients() const;

  /// One AdamW step over every tensor using the last gradients.
  void adamw_step(const AdamWConfig& cfg);

  bool all_finite() const;

 private:
  Mat input_rows(const Mat& x_t, const std::vector<int>& class_indices, const Mat& time_rows) const;

  std::vector<Mat> weights_, biases_;
  Mat embedding_;
  std::vector<Mat> grad_w_, grad_b_;
  Mat grad_embedding_;
  std::vector<Mat> m_w_, v_w_, m_b_, v_b_;
  Mat m_e_, v_e_;
  std::int64_t step_ = 0;
  std::vector<Mat> acts_;
};

extern template class DenoiserNet<float>;
extern template class DenoiserNet<double>;

}  // namespace moder
