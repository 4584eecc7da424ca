#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "atlas_replay/autodiff.hpp"

namespace atlas_replay {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class Real>
struct BasicAdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
};

using AdamState = BasicAdamState<float>;

/// One bias-corrected Adam update. Moments are created on the first call.
template <class Real>
void adam_step(std::vector<BasicTensor<Real>>& params, BasicAdamState<Real>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), Real(0));
      state.v.emplace_back(p.size(), Real(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractViolation("adam_step: optimizer state tracks a different parameter list");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) throw ContractViolation("adam_step: parameter " + std::to_string(k) + " has no gradient");
    if (state.m[k].size() != params[k].size()) throw ContractViolation("adam_step: moment shape mismatch");
  }

  ++state.step;
  const auto& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].mutable_values();
    auto g = params[k].grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double update = o.lr * (mi / c1) / (std::sqrt(vi / c2) + o.eps);
      theta[i] = static_cast<Real>(theta[i] - update);
    }
  }
}

}  // namespace atlas_replay
