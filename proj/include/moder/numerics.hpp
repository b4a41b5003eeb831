#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <concepts>
#include <numbers>

#include "moder/errors.hpp"

namespace moder {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatrixF = Eigen::MatrixXf;
using VectorF = Eigen::VectorXf;

/// Unit-norm embedding. Not a distinct type; functions that produce one
/// document the unit-norm postcondition.
using Embedding = Vector;

enum class Activation { Selu, Gelu, Tanh };

// Canonical self-normalizing constants.
inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

template <std::floating_point Scalar>
Scalar activate(Activation act, Scalar x) {
  using std::erf;
  using std::exp;
  using std::tanh;
  switch (act) {
    case Activation::Selu:
      return x > Scalar(0) ? Scalar(kSeluLambda) * x : Scalar(kSeluLambda * kSeluAlpha) * (exp(x) - Scalar(1));
    case Activation::Gelu:
      return Scalar(0.5) * x * (Scalar(1) + erf(x / Scalar(std::numbers::sqrt2)));
    case Activation::Tanh:
      return tanh(x);
  }
  return x;
}

template <std::floating_point Scalar>
Scalar activate_grad(Activation act, Scalar x) {
  using std::erf;
  using std::exp;
  using std::tanh;
  switch (act) {
    case Activation::Selu:
      return x > Scalar(0) ? Scalar(kSeluLambda) : Scalar(kSeluLambda * kSeluAlpha) * exp(x);
    case Activation::Gelu: {
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + erf(x / Scalar(std::numbers::sqrt2)));
      const Scalar pdf = exp(Scalar(-0.5) * x * x) / Scalar(std::sqrt(2.0 * std::numbers::pi));
      return cdf + x * pdf;
    }
    case Activation::Tanh: {
      const Scalar t = tanh(x);
      return Scalar(1) - t * t;
    }
  }
  return Scalar(1);
}

template <typename Derived>
auto activate(Activation act, const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([act](Scalar v) { return activate(act, v); });
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

/// dot(a, b) / (|a| |b|). Throws DomainError on a zero vector.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_sim(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine_sim: size mismatch");
  const auto na = a.norm();
  const auto nb = b.norm();
  if (na == 0 || nb == 0) throw DomainError("cosine_sim: zero vector");
  return a.dot(b) / (na * nb);
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> l2_normalize(const Eigen::MatrixBase<Derived>& v) {
  const auto n = v.norm();
  if (!(n > 0)) throw DomainError("l2_normalize: zero vector");
  return v / n;
}

/// Max-subtracted softmax.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw ContractError("softmax: empty input");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e = (v.array() - v.maxCoeff()).exp().matrix();
  return e / e.sum();
}

/// log(1 + exp(x)) without overflow.
template <std::floating_point Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > Scalar(0) ? x + log1p(exp(-x)) : log1p(exp(x));
}

template <std::floating_point Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace moder
