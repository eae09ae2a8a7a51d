// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cotrain/params.hpp"

namespace cotrain::diff {

// Central-difference gradients, coordinate by coordinate. `f` must be a
// deterministic pure evaluation (no recording) of the loss given the store.
// This is the numeric oracle the analytic backward pass is checked against;
// it never touches ComputationRecord.
inline std::map<std::string, std::vector<double>> finite_diff_grad(
    const std::function<double(ParameterStore&)>& f, ParameterStore& store, double h = 1e-5) {
  std::map<std::string, std::vector<double>> out;
  for (auto& [name, p] : store.all()) {
    std::vector<double> g(p.value.numel());
    double* x = p.value.mut();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = f(store);
      x[i] = orig - h;
      const double fm = f(store);
      x[i] = orig;
      g[i] = (fp - fm) / (2.0 * h);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

// worst relative disagreement between analytic store gradients and the
// numeric ones, with a small floor against 0/0
inline double max_rel_grad_err(const ParameterStore& store,
                               const std::map<std::string, std::vector<double>>& numeric) {
  double worst = 0.0;
  for (const auto& [name, p] : store.all()) {
    const std::vector<double>& num = numeric.at(name);
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double a = p.grad[i];
      const double n = num[i];
      const double denom = std::max({std::abs(a), std::abs(n), 1e-6});
      worst = std::max(worst, std::abs(a - n) / denom);
    }
  }
  return worst;
}

}  // namespace cotrain::diff
