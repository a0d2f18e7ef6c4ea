#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ham/error.hpp"
#include "ham/params.hpp"

namespace ham {

enum class OptimizerKind { RmsProp, Adam };

inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::RmsProp ? "rmsprop" : "adam"; }

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  std::vector<Tensor> first;   // Adam first moment
  std::vector<Tensor> second;  // squared-gradient accumulator
  std::size_t steps = 0;
};

struct RmsPropHyper {
  double decay = 0.99;
  double eps = 1e-8;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline OptimizerState make_optimizer(OptimizerKind kind, const ParamSet& params) {
  OptimizerState s;
  s.kind = kind;
  for (const auto& t : params.values) {
    s.second.emplace_back(t.shape(), 0.0);
    if (kind == OptimizerKind::Adam) s.first.emplace_back(t.shape(), 0.0);
  }
  return s;
}

namespace detail {
inline void check_grads(const ParamSet& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) throw ShapeError("optimizer: gradient count does not match parameter count");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != params.values[i].shape())
      throw ShapeError("optimizer: gradient shape mismatch for '" + params.names[i] + "'");
    if (!grads[i].all_finite()) throw NumericError("optimizer: non-finite gradient for '" + params.names[i] + "'");
  }
}
}  // namespace detail

// v <- decay*v + (1-decay)*g^2 ; p <- p - lr*g/(sqrt(v)+eps). No momentum.
inline void rmsprop_step(ParamSet& params, const std::vector<Tensor>& grads, OptimizerState& state, double lr,
                         const RmsPropHyper& h = {}) {
  detail::check_grads(params, grads);
  ++state.steps;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.values[i].data();
    auto& v = state.second[i].data();
    const auto& g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = h.decay * v[k] + (1.0 - h.decay) * g[k] * g[k];
      p[k] -= lr * g[k] / (std::sqrt(v[k]) + h.eps);
    }
  }
}

// Bias-corrected Adam.
inline void adam_step(ParamSet& params, const std::vector<Tensor>& grads, OptimizerState& state, double lr,
                      const AdamHyper& h = {}) {
  detail::check_grads(params, grads);
  ++state.steps;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.steps));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.values[i].data();
    auto& m = state.first[i].data();
    auto& v = state.second[i].data();
    const auto& g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + h.eps);
    }
  }
}

inline void optimizer_step(ParamSet& params, const std::vector<Tensor>& grads, OptimizerState& state, double lr) {
  if (state.kind == OptimizerKind::RmsProp)
    rmsprop_step(params, grads, state, lr);
  else
    adam_step(params, grads, state, lr);
}

}  // namespace ham
