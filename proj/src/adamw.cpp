#include "moder/adamw.hpp"

#include <cmath>

namespace moder {

AdamWState::AdamWState(AdamWConfig cfg) : config(cfg) {
  if (!(cfg.lr > 0.0)) throw ContractError("AdamW: learning rate must be positive");
  if (cfg.weight_decay < 0.0) throw ContractError("AdamW: weight decay must be non-negative");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
    throw ContractError("AdamW: betas must lie in [0, 1)");
  if (!(cfg.eps > 0.0)) throw ContractError("AdamW: eps must be positive");
}

void adamw_step(ParamSet& params, const Gradients& grads, AdamWState& state) {
  for (const auto& [name, g] : grads) {
    const Param& p = params.at(name);
    if (!p.trainable) throw ContractError("adamw_step: gradient supplied for frozen parameter '" + name + "'");
    if (g.rows() != p.value.rows() || g.cols() != p.value.cols())
      throw DimensionError("adamw_step: gradient shape mismatch for '" + name + "'");
  }
  for (const auto& [name, p] : params)
    if (p.trainable && grads.count(name) == 0)
      throw ContractError("adamw_step: missing gradient for trainable parameter '" + name + "'");

  state.step += 1;
  for (auto& [name, p] : params) {
    if (!p.trainable) continue;
    const Matrix& g = grads.at(name);
    auto [m_it, m_new] = state.first_moment.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    auto [v_it, v_new] = state.second_moment.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    adamw_update(p.value, m_it->second, v_it->second, g, state.config, state.step);
    if (!p.value.allFinite()) throw DivergenceError("adamw_step: parameter '" + name + "' became non-finite");
  }
}

}  // namespace moder
