#include "moder/autodiff.hpp"

#include <cmath>

namespace moder {

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::parameter(const ParamSet& params, const std::string& name) {
  const Param& p = params.at(name);
  if (!p.trainable) return constant(p.value);
  return leaf(p.value, name);
}

Var Tape::leaf(Matrix value, std::string grad_key) {
  Var v = push(std::move(value), true, nullptr);
  nodes_[v.id].grad_key = std::move(grad_key);
  return v;
}

Var Tape::push(Matrix value, bool requires_grad, BackwardFn backward) {
  if (consumed_) throw UsageError("Tape: cannot record on a consumed tape");
  if (!value.allFinite()) throw DivergenceError("Tape: non-finite value recorded");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Matrix& grad) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.has_grad) {
    n.grad += grad;
  } else {
    n.grad = grad;
    n.has_grad = true;
  }
}

void Tape::accumulate(std::size_t id, Matrix&& grad) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.has_grad) {
    n.grad += grad;
  } else {
    n.grad = std::move(grad);
    n.has_grad = true;
  }
}

Gradients Tape::backward(const Var& loss) {
  if (consumed_) throw UsageError("Tape: backward called on a consumed graph");
  if (loss.tape != this) throw UsageError("Tape: loss node belongs to another tape");
  if (loss.value().rows() != 1 || loss.value().cols() != 1) throw UsageError("Tape: loss must be a scalar node");
  consumed_ = true;

  accumulate(loss.id, Matrix::Ones(1, 1));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    // The callback may accumulate into earlier nodes only, so n stays valid.
    n.backward(*this, n.grad);
  }

  Gradients out;
  for (const Node& n : nodes_) {
    if (n.grad_key.empty()) continue;
    Matrix g = n.has_grad ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols());
    auto [it, inserted] = out.emplace(n.grad_key, g);
    if (!inserted) it->second += g;
  }
  return out;
}

namespace ag {
namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape == nullptr || a.tape != b.tape) throw UsageError("autodiff: operands recorded on different tapes");
  return *a.tape;
}

void require_shape(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok)
    throw DimensionError(std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

bool any_grad(const Tape& t, std::initializer_list<std::size_t> ids) {
  for (auto id : ids)
    if (t.requires_grad(id)) return true;
  return false;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_shape(a.cols() == b.rows(), "matmul", a.value(), b.value());
  const auto ia = a.id, ib = b.id;
  return t.push(a.value() * b.value(), any_grad(t, {ia, ib}), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Tape& t = same_tape(x, w);
  same_tape(x, b);
  require_shape(x.cols() == w.cols(), "linear", x.value(), w.value());
  require_shape(b.cols() == 1 && b.rows() == w.rows(), "linear", w.value(), b.value());
  const auto ix = x.id, iw = w.id, ib = b.id;
  Matrix out(x.rows(), w.rows());
  out.noalias() = x.value() * w.value().transpose();
  out.rowwise() += b.value().col(0).transpose();
  return t.push(std::move(out), any_grad(t, {ix, iw, ib}), [ix, iw, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ix)) {
      Matrix dx(g.rows(), tp.value(iw).cols());
      dx.noalias() = g * tp.value(iw);
      tp.accumulate(ix, std::move(dx));
    }
    if (tp.requires_grad(iw)) {
      Matrix dw(g.cols(), tp.value(ix).cols());
      dw.noalias() = g.transpose() * tp.value(ix);
      tp.accumulate(iw, std::move(dw));
    }
    if (tp.requires_grad(ib)) tp.accumulate(ib, Matrix(g.colwise().sum().transpose()));
  });
}

Var transpose(const Var& a) {
  Tape& t = *a.tape;
  const auto ia = a.id;
  return t.push(a.value().transpose(), t.requires_grad(ia),
                [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.transpose()); });
}

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", a.value(), b.value());
  const auto ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), any_grad(t, {ia, ib}), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub", a.value(), b.value());
  const auto ia = a.id, ib = b.id;
  return t.push(a.value() - b.value(), any_grad(t, {ia, ib}), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

Var scale(const Var& a, double s) {
  Tape& t = *a.tape;
  const auto ia = a.id;
  return t.push(a.value() * s, t.requires_grad(ia), [ia, s](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * s); });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard", a.value(), b.value());
  const auto ia = a.id, ib = b.id;
  return t.push(a.value().cwiseProduct(b.value()), any_grad(t, {ia, ib}), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

Var add_row_bias(const Var& a, const Var& bias) {
  Tape& t = same_tape(a, bias);
  require_shape(bias.cols() == 1 && bias.rows() == a.cols(), "add_row_bias", a.value(), bias.value());
  const auto ia = a.id, ib = bias.id;
  Matrix out = a.value().rowwise() + bias.value().col(0).transpose();
  return t.push(std::move(out), any_grad(t, {ia, ib}), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum().transpose());
  });
}

Var scale_rows(const Var& a, const Var& v) {
  Tape& t = same_tape(a, v);
  require_shape(v.cols() == 1 && v.rows() == a.rows(), "scale_rows", a.value(), v.value());
  const auto ia = a.id, iv = v.id;
  Matrix out = v.value().col(0).asDiagonal() * a.value();
  return t.push(std::move(out), any_grad(t, {ia, iv}), [ia, iv](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, tp.value(iv).col(0).asDiagonal() * g);
    if (tp.requires_grad(iv)) tp.accumulate(iv, g.cwiseProduct(tp.value(ia)).rowwise().sum());
  });
}

Var scale_cols(const Var& a, const Var& v) {
  Tape& t = same_tape(a, v);
  require_shape(v.cols() == 1 && v.rows() == a.cols(), "scale_cols", a.value(), v.value());
  const auto ia = a.id, iv = v.id;
  Matrix out = a.value() * v.value().col(0).asDiagonal();
  return t.push(std::move(out), any_grad(t, {ia, iv}), [ia, iv](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(iv).col(0).asDiagonal());
    if (tp.requires_grad(iv)) tp.accumulate(iv, g.cwiseProduct(tp.value(ia)).colwise().sum().transpose());
  });
}

Var activation(const Var& a, Activation act) {
  Tape& t = *a.tape;
  const auto ia = a.id;
  if (act == Activation::Selu) {
    // Vectorized path; the gradient on the negative side is y + lambda * alpha.
    const auto x = a.value().array();
    Matrix out = (x > 0.0).select(kSeluLambda * x, (kSeluLambda * kSeluAlpha) * (x.exp() - 1.0)).matrix();
    const std::size_t iy = t.size();
    return t.push(std::move(out), t.requires_grad(ia), [ia, iy](Tape& tp, const Matrix& g) {
      const auto y = tp.value(iy).array();
      tp.accumulate(ia, Matrix(g.array() * (y > 0.0).select(kSeluLambda, y + kSeluLambda * kSeluAlpha)));
    });
  }
  Matrix out = activate(act, a.value());
  return t.push(std::move(out), t.requires_grad(ia), [ia, act](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(ia);
    tp.accumulate(ia, Matrix(g.cwiseProduct(x.unaryExpr([act](double v) { return activate_grad(act, v); }))));
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  Tape& t = same_tape(a, gamma);
  same_tape(a, beta);
  const Eigen::Index k = a.cols();
  require_shape(gamma.rows() == k && gamma.cols() == 1, "layer_norm_rows", a.value(), gamma.value());
  require_shape(beta.rows() == k && beta.cols() == 1, "layer_norm_rows", a.value(), beta.value());

  const Matrix& x = a.value();
  Matrix xhat(x.rows(), k);
  Vector inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat * gamma.value().col(0).asDiagonal()).rowwise() + beta.value().col(0).transpose();

  const auto ia = a.id, ig = gamma.id, ib = beta.id;
  return t.push(std::move(out), any_grad(t, {ia, ig, ib}),
                [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(ig)) tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum().transpose());
                  if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum().transpose());
                  if (!tp.requires_grad(ia)) return;
                  const Matrix dxhat = g * tp.value(ig).col(0).asDiagonal();
                  Matrix dx(dxhat.rows(), dxhat.cols());
                  for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                    const double m1 = dxhat.row(r).mean();
                    const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                    dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                  }
                  tp.accumulate(ia, dx);
                });
}

Var l2_normalize_rows(const Var& a) {
  Tape& t = *a.tape;
  const Matrix& x = a.value();
  Vector norms = x.rowwise().norm();
  if ((norms.array() <= 0.0).any()) throw DomainError("l2_normalize_rows: zero row");
  Matrix y = norms.cwiseInverse().asDiagonal() * x;
  const auto ia = a.id;
  Matrix y_copy = y;
  return t.push(std::move(y), t.requires_grad(ia),
                [ia, y = std::move(y_copy), norms = std::move(norms)](Tape& tp, const Matrix& g) {
                  const Vector proj = g.cwiseProduct(y).rowwise().sum();
                  Matrix dx = g - proj.asDiagonal() * y;
                  tp.accumulate(ia, norms.cwiseInverse().asDiagonal() * dx);
                });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  Tape& t = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs = false;
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> widths;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    require_shape(p.rows() == rows, "concat_cols", parts.front().value(), p.value());
    cols += p.cols();
    needs = needs || t.requires_grad(p.id);
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return t.push(std::move(out), needs, [ids, widths](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.requires_grad(ids[i])) tp.accumulate(ids[i], g.middleCols(off, widths[i]));
      off += widths[i];
    }
  });
}

Var sum(const Var& a) {
  Tape& t = *a.tape;
  const auto ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(Matrix::Constant(1, 1, a.value().sum()), t.requires_grad(ia),
                [ia, r, c](Tape& tp, const Matrix& g) { tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0))); });
}

Var mean(const Var& a) {
  Tape& t = *a.tape;
  const auto ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  const double n = static_cast<double>(a.value().size());
  return t.push(Matrix::Constant(1, 1, a.value().mean()), t.requires_grad(ia),
                [ia, r, c, n](Tape& tp, const Matrix& g) { tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0) / n)); });
}

Var mse(const Var& a, const Matrix& target) {
  Tape& t = *a.tape;
  if (a.rows() != target.rows() || a.cols() != target.cols()) throw DimensionError("mse: shape mismatch");
  Matrix diff = a.value() - target;
  const double n = static_cast<double>(diff.size());
  const double value = diff.squaredNorm() / n;
  const auto ia = a.id;
  return t.push(Matrix::Constant(1, 1, value), t.requires_grad(ia),
                [ia, diff = std::move(diff), n](Tape& tp, const Matrix& g) { tp.accumulate(ia, diff * (2.0 * g(0, 0) / n)); });
}

Var sigmoid_loss(const Var& sims, const Matrix& signs) {
  Tape& t = *sims.tape;
  const Matrix& s = sims.value();
  if (signs.rows() != s.rows() || signs.cols() != s.cols()) throw DimensionError("sigmoid_loss: signs shape mismatch");
  const double n = static_cast<double>(s.rows());
  double total = 0.0;
  for (Eigen::Index r = 0; r < s.rows(); ++r)
    for (Eigen::Index c = 0; c < s.cols(); ++c) total += softplus(-s(r, c) * signs(r, c));
  const auto is = sims.id;
  return t.push(Matrix::Constant(1, 1, total / n), t.requires_grad(is), [is, signs, n](Tape& tp, const Matrix& g) {
    const Matrix& sv = tp.value(is);
    Matrix d(sv.rows(), sv.cols());
    for (Eigen::Index r = 0; r < sv.rows(); ++r)
      for (Eigen::Index c = 0; c < sv.cols(); ++c)
        d(r, c) = -signs(r, c) * sigmoid(-sv(r, c) * signs(r, c)) * g(0, 0) / n;
    tp.accumulate(is, d);
  });
}

Var cross_entropy(const Var& sims, const std::vector<int>& labels, double temperature) {
  Tape& t = *sims.tape;
  const Matrix& s = sims.value();
  if (static_cast<Eigen::Index>(labels.size()) != s.rows()) throw DimensionError("cross_entropy: label count mismatch");
  if (!(temperature > 0.0)) throw DomainError("cross_entropy: temperature must be positive");
  const double n = static_cast<double>(s.rows());
  Matrix probs(s.rows(), s.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const int j = labels[static_cast<std::size_t>(r)];
    if (j < 0 || j >= s.cols()) throw ContractError("cross_entropy: label out of range");
    const Eigen::RowVectorXd logits = s.row(r) / temperature;
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    total += lse - logits(j);
    probs.row(r) = (logits.array() - lse).exp();
  }
  const auto is = sims.id;
  return t.push(Matrix::Constant(1, 1, total / n), t.requires_grad(is),
                [is, labels, n, temperature, probs = std::move(probs)](Tape& tp, const Matrix& g) {
                  Matrix d = probs;
                  for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
                  tp.accumulate(is, d * (g(0, 0) / (n * temperature)));
                });
}

}  // namespace ag
}  // namespace moder
