#pragma once

#include <functional>
#include <string>
#include <vector>

#include "moder/numerics.hpp"
#include "moder/params.hpp"

namespace moder {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Reverse-mode tape over dense matrices. Nodes are appended in topological
/// order, so backward is a single reverse sweep. A tape can be consumed once.
/// Confined to one thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Var constant(Matrix value);

  /// Binds a parameter. Trainable parameters receive a gradient under their
  /// name; frozen ones are recorded as constants.
  Var parameter(const ParamSet& params, const std::string& name);

  /// Trainable leaf whose gradient is reported under `grad_key`.
  Var leaf(Matrix value, std::string grad_key);

  /// Appends an interior node. `backward` receives d(loss)/d(this node) and
  /// must call accumulate() on its parents.
  Var push(Matrix value, bool requires_grad, BackwardFn backward);

  void accumulate(std::size_t id, const Matrix& grad);
  void accumulate(std::size_t id, Matrix&& grad);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }

  /// Gradients of a scalar (1x1) node with respect to every trainable leaf
  /// that the loss depends on. Leaves the loss does not reach get zeros.
  Gradients backward(const Var& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::string grad_key;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Matrix& Var::value() const { return tape->value(id); }

/// Differentiable operations. Row-major batch convention: a batch of N
/// vectors of width k is an N x k matrix; column vectors (k x 1) hold biases
/// and per-feature parameters.
namespace ag {

Var matmul(const Var& a, const Var& b);
/// x * w^T + b per row, without materializing w^T. w is out x in, b is out x 1.
Var linear(const Var& x, const Var& w, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var hadamard(const Var& a, const Var& b);
/// a (N x k) + bias^T for every row; bias is k x 1.
Var add_row_bias(const Var& a, const Var& bias);
/// diag(v) * a; v has a.rows() entries.
Var scale_rows(const Var& a, const Var& v);
/// a * diag(v); v has a.cols() entries.
Var scale_cols(const Var& a, const Var& v);
Var activation(const Var& a, Activation act);
/// Per-row layer normalization with per-feature gain and shift (k x 1).
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps);
Var l2_normalize_rows(const Var& a);
Var concat_cols(const std::vector<Var>& parts);
Var sum(const Var& a);
Var mean(const Var& a);
/// Mean over all entries of (a - target)^2; target is a constant.
Var mse(const Var& a, const Matrix& target);
/// Mean over rows of sum over columns of log(1 + exp(-s * y)), y = signs(n, c) in {+1, -1}.
Var sigmoid_loss(const Var& sims, const Matrix& signs);
/// Mean over rows of -log softmax(sims[n, :] / temperature)[labels[n]].
Var cross_entropy(const Var& sims, const std::vector<int>& labels, double temperature);

}  // namespace ag

}  // namespace moder
