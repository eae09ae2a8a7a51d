// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotrain/rng.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain::diff {

// Named trainable tensors plus Adam moments. std::map keeps iteration in
// parameter-name order, which fixes the update order and the checkpoint
// layout.
class ParameterStore {
 public:
  struct Param {
    Tensor value;
    std::vector<double> grad;
    std::vector<double> m;
    std::vector<double> v;
  };

  Tensor& add(const std::string& name, Tensor init) {
    if (params_.count(name)) throw std::invalid_argument("ParameterStore: duplicate name " + name);
    Param p;
    p.grad.assign(init.numel(), 0.0);
    p.m.assign(init.numel(), 0.0);
    p.v.assign(init.numel(), 0.0);
    p.value = std::move(init);
    return params_.emplace(name, std::move(p)).first->second.value;
  }

  Tensor& add_gaussian(const std::string& name, int rows, int cols, double stddev, Rng& rng) {
    Tensor t(rows, cols);
    for (double& x : *t.data) x = rng.normal(0.0, stddev);
    return add(name, std::move(t));
  }

  Tensor& add_zeros(const std::string& name, int rows, int cols) { return add(name, Tensor(rows, cols)); }
  Tensor& add_const(const std::string& name, int rows, int cols, double fill) {
    Tensor t(rows, cols);
    for (double& x : *t.data) x = fill;
    return add(name, std::move(t));
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParameterStore: no parameter " + name);
    return it->second.value;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParameterStore: no parameter " + name);
    return it->second.value;
  }

  Param& param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParameterStore: no parameter " + name);
    return it->second;
  }

  std::map<std::string, Param>& all() { return params_; }
  const std::map<std::string, Param>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }

  // put every parameter on the record as a leaf
  void watch_all(ComputationRecord& rec) {
    for (auto& [name, p] : params_) rec.watch(p.value);
  }

  // pull gradients off the record into the store; parameters the loss never
  // reached accumulate zero
  void harvest(ComputationRecord& rec) {
    for (auto& [name, p] : params_) {
      if (p.value.node >= 0 && rec.has_grad(p.value.node)) {
        const std::vector<double>& g = rec.grad(p.value.node);
        for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
      }
      p.value.node = -1;
    }
  }

  void zero_grads() {
    for (auto& [name, p] : params_)
      std::fill(p.grad.begin(), p.grad.end(), 0.0);
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& [name, p] : params_)
      for (double g : p.grad) s += g * g;
    return std::sqrt(s);
  }

 private:
  std::map<std::string, Param> params_;
  std::int64_t step_ = 0;
};

// bias-corrected Adam, applied in name order; gradients are zeroed after
inline void adam_step(ParameterStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  store.set_step_count(store.step_count() + 1);
  const double t = static_cast<double>(store.step_count());
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (auto& [name, p] : store.all()) {
    double* x = p.value.mut();
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      const double g = p.grad[i];
      p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
      p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
      const double mhat = p.m[i] / c1;
      const double vhat = p.v[i] / c2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      p.grad[i] = 0.0;
    }
  }
}

}  // namespace cotrain::diff
