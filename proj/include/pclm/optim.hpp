#pragma once

// Adam with decoupled weight decay. Decay touches rank-2 tensors only, so
// biases and layer-norm gains/offsets are left alone.

#include <cmath>
#include <map>
#include <string>

#include "pclm/params.hpp"

namespace pclm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

inline bool decays(const Tensor& t) { return t.rank() == 2; }

// One update using the gradients accumulated in each parameter's buffer.
// Parameters without a gradient buffer are treated as having zero gradient.
inline void adam_step(ParameterStore& params, AdamState& state, const AdamConfig& cfg) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params.tensors()) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    m.resize(p.numel(), 0.0);
    v.resize(p.numel(), 0.0);
    auto x = p.mutable_data();
    auto g = p.grad();
    const double decay = decays(p) ? cfg.lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      x[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps) + decay * x[i];
    }
  }
}

inline double grad_norm(const ParameterStore& params) {
  double s = 0.0;
  for (const auto& [name, p] : params.tensors())
    for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

}  // namespace pclm
