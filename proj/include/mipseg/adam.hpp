#pragma once

#include <cmath>
#include <vector>

#include "mipseg/tensor.hpp"

namespace mipseg {

// Adam with bias correction. Moment grids are allocated to match the
// parameter list on the first step and keyed by position.
template <typename T>
struct AdamState {
  T learning_rate = T(0.001);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), T(0));
      state.v[i].assign(params[i].size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter list changed size");

  state.step += 1;
  const double b1 = static_cast<double>(state.beta1);
  const double b2 = static_cast<double>(state.beta2);
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;  // untouched by this tape
    auto g = params[i].grad();
    auto w = params[i].values_mut();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != w.size()) throw ShapeError("adam_step: moment grid shape mismatch");
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * gk);
      v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * gk * gk);
      const double mhat = static_cast<double>(m[k]) / corr1;
      const double vhat = static_cast<double>(v[k]) / corr2;
      w[k] -= static_cast<T>(static_cast<double>(state.learning_rate) * mhat /
                             (std::sqrt(vhat) + static_cast<double>(state.epsilon)));
    }
  }
}

template <typename T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace mipseg
