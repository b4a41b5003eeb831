#include "moder/mlp.hpp"

#include <cmath>

namespace moder {

std::string mlp_weight_name(int layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string mlp_bias_name(int layer) { return "layer" + std::to_string(layer) + ".bias"; }

int mlp_depth(const ParamSet& params) {
  int depth = 0;
  while (params.contains(mlp_weight_name(depth))) ++depth;
  if (depth == 0) throw ContractError("mlp: parameter set holds no layers");
  return depth;
}

ParamSet make_mlp(std::span<const int> widths, SeededRng& rng, bool trainable) {
  if (widths.size() < 2) throw ContractError("make_mlp: need at least input and output widths");
  ParamSet p;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int in = widths[l], out = widths[l + 1];
    if (in <= 0 || out <= 0) throw DimensionError("make_mlp: non-positive width at layer " + std::to_string(l));
    const int layer = static_cast<int>(l);
    p.add(mlp_weight_name(layer), rng.normal_matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in))), trainable);
    p.add(mlp_bias_name(layer), Matrix::Zero(out, 1), trainable);
  }
  return p;
}

namespace {

void check_layer(const Matrix& w, const Matrix& b, Eigen::Index in, int layer) {
  if (w.cols() != in)
    throw DimensionError("mlp: layer " + std::to_string(layer) + " expects input width " + std::to_string(w.cols()) +
                         ", got " + std::to_string(in));
  if (b.rows() != w.rows() || b.cols() != 1)
    throw DimensionError("mlp: layer " + std::to_string(layer) + " bias shape does not match weight");
}

}  // namespace

Matrix forward_mlp_batch(const ParamSet& params, const Matrix& rows, Activation act) {
  const int depth = mlp_depth(params);
  Matrix h = rows;
  for (int l = 0; l < depth; ++l) {
    const Matrix& w = params.value(mlp_weight_name(l));
    const Matrix& b = params.value(mlp_bias_name(l));
    check_layer(w, b, h.cols(), l);
    Matrix z = (h * w.transpose()).rowwise() + b.col(0).transpose();
    h = (l + 1 < depth) ? Matrix(activate(act, z)) : std::move(z);
  }
  return h;
}

Vector forward_mlp(const ParamSet& params, const Vector& input, Activation act) {
  return forward_mlp_batch(params, input.transpose(), act).row(0).transpose();
}

Var forward_mlp(Tape& tape, const ParamSet& params, const Var& rows, Activation act) {
  const int depth = mlp_depth(params);
  Var h = rows;
  for (int l = 0; l < depth; ++l) {
    const std::string wn = mlp_weight_name(l), bn = mlp_bias_name(l);
    check_layer(params.value(wn), params.value(bn), h.cols(), l);
    Var w = tape.parameter(params, wn);
    Var b = tape.parameter(params, bn);
    h = ag::linear(h, w, b);
    if (l + 1 < depth) h = ag::activation(h, act);
  }
  return h;
}

}  // namespace moder
