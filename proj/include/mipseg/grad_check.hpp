#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mipseg/tensor.hpp"

namespace mipseg {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

// Compares tape gradients against central finite differences for every
// element of every listed parameter. The forward callable must be a
// deterministic pure function of the parameter values (fix dropout seeds).
// Meant to run on the double instantiation of the ops.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& forward,
                           const std::vector<std::pair<std::string, Tensor<T>>>& params,
                           T step = T(1e-4)) {
  for (auto& [name, p] : params)
    const_cast<Tensor<T>&>(p).zero_grad();

  Tape<T> tape;
  {
    typename Tape<T>::Scope scope(tape);
    Tensor<T> loss = forward();
    tape.backward(loss);
  }
  std::vector<std::vector<T>> analytic(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].second;
    analytic[i].assign(p.size(), T(0));
    if (p.has_grad()) {
      auto g = p.grad();
      std::copy(g.begin(), g.end(), analytic[i].begin());
    }
  }
  tape.clear();

  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i].second;
    auto w = p.values_mut();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const T saved = w[k];
      w[k] = saved + step;
      const double plus = static_cast<double>(forward().item());
      w[k] = saved - step;
      const double minus = static_cast<double>(forward().item());
      w[k] = saved;
      const double numeric = (plus - minus) / (2.0 * static_cast<double>(step));
      const double a = static_cast<double>(analytic[i][k]);
      const double scale = std::max({std::abs(a), std::abs(numeric), 1e-6});
      const double rel = std::abs(a - numeric) / scale;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = params[i].first;
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace mipseg
