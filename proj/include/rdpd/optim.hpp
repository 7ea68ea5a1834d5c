#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rdpd/autodiff.hpp"
#include "rdpd/errors.hpp"

namespace rdpd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class Real>
struct AdamState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::uint64_t t = 0;  // completed steps
};

// One bias-corrected Adam update over `params` using their accumulated
// gradients. Aborts before touching anything if a gradient is not finite.
template <class Real>
void adam_step(std::vector<Tensor<Real>>& params, AdamState<Real>& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), Real(0));
      state.v.emplace_back(p.numel(), Real(0));
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].numel() != state.m[k].size()) throw ShapeError("adam state does not match parameters");
    for (Real g : params[k].grad()) {
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient at Adam step " + std::to_string(state.t + 1));
    }
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const Real b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_data();
    const auto g = params[k].grad();
    if (g.empty()) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (Real(1) - b1) * g[i];
      v[i] = b2 * v[i] + (Real(1) - b2) * g[i] * g[i];
      const double m_hat = static_cast<double>(m[i]) / bc1;
      const double v_hat = static_cast<double>(v[i]) / bc2;
      w[i] -= static_cast<Real>(cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
  }
}

}  // namespace rdpd
