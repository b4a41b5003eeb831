#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "moder/params.hpp"

namespace moder {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  // Not given by the method description; common defaults.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates and step count for one ParamSet. Moments are created
/// lazily on the first step with the parameter's shape.
struct AdamWState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::map<std::string, Matrix> first_moment;
  std::map<std::string, Matrix> second_moment;

  explicit AdamWState(AdamWConfig cfg = {});
};

/// In-place AdamW update of one tensor at step `step` (1-based).
template <typename Derived, typename GradDerived>
void adamw_update(Eigen::MatrixBase<Derived>& value, Eigen::MatrixBase<Derived>& m, Eigen::MatrixBase<Derived>& v,
                  const Eigen::MatrixBase<GradDerived>& g, const AdamWConfig& c, std::int64_t step) {
  using Scalar = typename Derived::Scalar;
  const double t = static_cast<double>(step);
  const auto bias1 = static_cast<Scalar>(1.0 - std::pow(c.beta1, t));
  const auto bias2 = static_cast<Scalar>(1.0 - std::pow(c.beta2, t));
  const auto decay = static_cast<Scalar>(1.0 - c.lr * c.weight_decay);
  const auto b1 = static_cast<Scalar>(c.beta1), b2 = static_cast<Scalar>(c.beta2);
  const auto lr = static_cast<Scalar>(c.lr), eps = static_cast<Scalar>(c.eps);
  value.derived() *= decay;
  m.derived() = b1 * m.derived() + (Scalar(1) - b1) * g.derived();
  v.derived() = b2 * v.derived() + (Scalar(1) - b2) * g.derived().cwiseAbs2();
  value.derived().array() -= lr * (m.derived().array() / bias1) / ((v.derived().array() / bias2).sqrt() + eps);
}

/// One decoupled-weight-decay Adam step (decay applied first, as in
/// torch.optim.AdamW). `grads` must cover exactly the trainable parameters;
/// frozen parameters are never touched.
void adamw_step(ParamSet& params, const Gradients& grads, AdamWState& state);

}  // namespace moder
