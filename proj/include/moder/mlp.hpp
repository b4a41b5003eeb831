#pragma once

#include <span>
#include <string>

#include "moder/autodiff.hpp"
#include "moder/rng.hpp"

namespace moder {

// Layer l of an MLP is stored as "layer<l>.weight" (out x in) and
// "layer<l>.bias" (out x 1). The activation follows every layer but the last.

std::string mlp_weight_name(int layer);
std::string mlp_bias_name(int layer);
int mlp_depth(const ParamSet& params);

/// LeCun-normal weights (variance 1/fan_in), zero biases.
ParamSet make_mlp(std::span<const int> widths, SeededRng& rng, bool trainable = true);

Vector forward_mlp(const ParamSet& params, const Vector& input, Activation act);
Matrix forward_mlp_batch(const ParamSet& params, const Matrix& rows, Activation act);
Var forward_mlp(Tape& tape, const ParamSet& params, const Var& rows, Activation act);

}  // namespace moder
