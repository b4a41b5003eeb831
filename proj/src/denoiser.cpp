#include "moder/denoiser.hpp"

#include "moder/mlp.hpp"

namespace moder {

namespace {

template <typename Mat>
void selu_inplace(Mat& z) {
  using S = typename Mat::Scalar;
  auto a = z.array();
  a = (a > S(0)).select(S(kSeluLambda) * a, S(kSeluLambda * kSeluAlpha) * (a.exp() - S(1)));
}

}  // namespace

template <typename Scalar>
DenoiserNet<Scalar>::DenoiserNet(const ParamSet& params) {
  const int depth = mlp_depth(params);
  for (int l = 0; l < depth; ++l) {
    weights_.push_back(params.value(mlp_weight_name(l)).template cast<Scalar>());
    biases_.push_back(params.value(mlp_bias_name(l)).template cast<Scalar>());
  }
  embedding_ = params.value("class_embedding").template cast<Scalar>();
  for (int l = 0; l < depth; ++l) {
    m_w_.push_back(Mat::Zero(weights_[l].rows(), weights_[l].cols()));
    m_b_.push_back(Mat::Zero(biases_[l].rows(), 1));
  }
  v_w_ = m_w_;
  v_b_ = m_b_;
  m_e_ = v_e_ = Mat::Zero(embedding_.rows(), embedding_.cols());
}

template <typename Scalar>
void DenoiserNet<Scalar>::store(ParamSet& params) const {
  auto put = [&params](const std::string& name, const Mat& v) {
    Matrix& dst = params.at(name).value;
    if (dst.rows() != v.rows() || dst.cols() != v.cols()) throw DimensionError("DenoiserNet: shape mismatch on store");
    dst = v.template cast<double>();
  };
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    put(mlp_weight_name(static_cast<int>(l)), weights_[l]);
    put(mlp_bias_name(static_cast<int>(l)), biases_[l]);
  }
  put("class_embedding", embedding_);
}

template <typename Scalar>
typename DenoiserNet<Scalar>::Mat DenoiserNet<Scalar>::input_rows(const Mat& x_t, const std::vector<int>& class_indices,
                                                                  const Mat& time_rows) const {
  const Eigen::Index n = x_t.rows();
  if (static_cast<Eigen::Index>(class_indices.size()) != n || time_rows.rows() != n)
    throw DimensionError("DenoiserNet: batch size mismatch");
  const Eigen::Index d = x_t.cols(), c = embedding_.cols();
  if (d + c + time_rows.cols() != weights_.front().cols()) throw DimensionError("DenoiserNet: input width mismatch");
  Mat in(n, weights_.front().cols());
  in.leftCols(d) = x_t;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int k = class_indices[static_cast<std::size_t>(r)];
    if (k < 0 || k >= embedding_.rows()) throw LookupError("DenoiserNet: class index out of range");
    in.row(r).segment(d, c) = embedding_.row(k);
  }
  in.rightCols(time_rows.cols()) = time_rows;
  return in;
}

template <typename Scalar>
typename DenoiserNet<Scalar>::Mat DenoiserNet<Scalar>::predict(const Mat& x_t, const std::vector<int>& class_indices,
                                                               const Mat& time_rows) const {
  Mat h = input_rows(x_t, class_indices, time_rows);
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Mat z(h.rows(), weights_[l].rows());
    z.noalias() = h * weights_[l].transpose();
    z.rowwise() += biases_[l].col(0).transpose();
    if (l + 1 < weights_.size()) selu_inplace(z);
    h = std::move(z);
  }
  return h;
}

template <typename Scalar>
Scalar DenoiserNet<Scalar>::loss_and_grad(const Mat& x_t, const std::vector<int>& class_indices, const Mat& time_rows,
                                          const Mat& eps) {
  const std::size_t depth = weights_.size();
  acts_.resize(depth + 1);
  acts_[0] = input_rows(x_t, class_indices, time_rows);
  for (std::size_t l = 0; l < depth; ++l) {
    Mat& z = acts_[l + 1];
    z.resize(acts_[l].rows(), weights_[l].rows());
    z.noalias() = acts_[l] * weights_[l].transpose();
    z.rowwise() += biases_[l].col(0).transpose();
    if (l + 1 < depth) selu_inplace(z);
  }
  if (eps.rows() != acts_[depth].rows() || eps.cols() != acts_[depth].cols())
    throw DimensionError("DenoiserNet: target shape mismatch");
  Mat dz = acts_[depth] - eps;
  const auto n = static_cast<Scalar>(dz.size());
  const Scalar loss = dz.squaredNorm() / n;
  dz *= Scalar(2) / n;

  grad_w_.resize(depth);
  grad_b_.resize(depth);
  for (std::size_t l = depth; l-- > 0;) {
    grad_w_[l].resize(weights_[l].rows(), weights_[l].cols());
    grad_w_[l].noalias() = dz.transpose() * acts_[l];
    grad_b_[l] = dz.colwise().sum().transpose();
    Mat dh(dz.rows(), weights_[l].cols());
    dh.noalias() = dz * weights_[l];
    if (l > 0) {
      // SELU'(x) from y = SELU(x): lambda where y > 0, y + lambda * alpha elsewhere.
      const auto y = acts_[l].array();
      dh.array() *= (y > Scalar(0)).select(Scalar(kSeluLambda), y + Scalar(kSeluLambda * kSeluAlpha));
    }
    dz = std::move(dh);
  }
  const Eigen::Index d = x_t.cols(), c = embedding_.cols();
  grad_embedding_ = Mat::Zero(embedding_.rows(), c);
  for (Eigen::Index r = 0; r < dz.rows(); ++r)
    grad_embedding_.row(class_indices[static_cast<std::size_t>(r)]) += dz.row(r).segment(d, c);
  return loss;
}

template <typename Scalar>
Gradients DenoiserNet<Scalar>::gradients() const {
  Gradients g;
  for (std::size_t l = 0; l < grad_w_.size(); ++l) {
    g[mlp_weight_name(static_cast<int>(l))] = grad_w_[l].template cast<double>();
    g[mlp_bias_name(static_cast<int>(l))] = grad_b_[l].template cast<double>();
  }
  g["class_embedding"] = grad_embedding_.template cast<double>();
  return g;
}

template <typename Scalar>
void DenoiserNet<Scalar>::adamw_step(const AdamWConfig& cfg) {
  if (grad_w_.size() != weights_.size()) throw UsageError("DenoiserNet: adamw_step before loss_and_grad");
  ++step_;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    adamw_update(weights_[l], m_w_[l], v_w_[l], grad_w_[l], cfg, step_);
    adamw_update(biases_[l], m_b_[l], v_b_[l], grad_b_[l], cfg, step_);
  }
  adamw_update(embedding_, m_e_, v_e_, grad_embedding_, cfg, step_);
}

template <typename Scalar>
bool DenoiserNet<Scalar>::all_finite() const {
  for (std::size_t l = 0; l < weights_.size(); ++l)
    if (!weights_[l].allFinite() || !biases_[l].allFinite()) return false;
  return embedding_.allFinite();
}

template class DenoiserNet<float>;
template class DenoiserNet<double>;

}  // namespace moder
