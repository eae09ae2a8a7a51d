// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef COTRAIN_USE_CBLAS
#include <cblas.h>
#endif

namespace cotrain::diff {

#if !defined(NDEBUG) || defined(COTRAIN_FINITE_CHECKS)
#define COTRAIN_CHECK_FINITE_ENABLED 1
#else
#define COTRAIN_CHECK_FINITE_ENABLED 0
#endif

// Dense rank-2 tensor of doubles, row-major. Vectors are 1 x n, scalars
// 1 x 1. The value buffer is immutable once the tensor participates in a
// recorded computation; `node` indexes the active ComputationRecord and is
// -1 for constants.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::shared_ptr<std::vector<double>> data;
  int node = -1;

  Tensor() = default;
  Tensor(int r, int c)
      : rows(r), cols(c), data(std::make_shared<std::vector<double>>(static_cast<std::size_t>(r) * c, 0.0)) {
    if (r <= 0 || c <= 0) throw std::invalid_argument("Tensor: non-positive shape");
  }
  Tensor(int r, int c, std::vector<double> v) : rows(r), cols(c) {
    if (r <= 0 || c <= 0) throw std::invalid_argument("Tensor: non-positive shape");
    if (v.size() != static_cast<std::size_t>(r) * c)
      throw std::invalid_argument("Tensor: value count does not match shape");
    data = std::make_shared<std::vector<double>>(std::move(v));
  }

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor scalar(double v) { return Tensor(1, 1, {v}); }

  std::size_t numel() const { return static_cast<std::size_t>(rows) * cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  double value() const {
    if (!is_scalar()) throw std::logic_error("Tensor::value: not a scalar");
    return (*data)[0];
  }

  const double* ptr() const { return data->data(); }
  double* mut() { return data->data(); }

  double at(int i, int j) const { return (*data)[static_cast<std::size_t>(i) * cols + j]; }
  double& at(int i, int j) { return (*data)[static_cast<std::size_t>(i) * cols + j]; }

  // same values, no graph membership
  Tensor detached() const {
    Tensor t = *this;
    t.node = -1;
    return t;
  }

  std::string shape_str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
};

inline void check_finite(const Tensor& t, const char* op) {
#if COTRAIN_CHECK_FINITE_ENABLED
  for (double v : *t.data) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value out of op ") + op);
  }
#else
  (void)t;
  (void)op;
#endif
}

// C = alpha * op(A) * op(B) + beta * C, all row-major.
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
#ifdef COTRAIN_USE_CBLAS
  static const bool single_thread = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)single_thread;
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
#else
  if (beta == 0.0) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) c[static_cast<std::size_t>(i) * ldc + j] = 0.0;
  } else if (beta != 1.0) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) c[static_cast<std::size_t>(i) * ldc + j] *= beta;
  }
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      double av = ta ? a[static_cast<std::size_t>(p) * lda + i] : a[static_cast<std::size_t>(i) * lda + p];
      av *= alpha;
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) {
        double bv = tb ? b[static_cast<std::size_t>(j) * ldb + p] : b[static_cast<std::size_t>(p) * ldb + j];
        c[static_cast<std::size_t>(i) * ldc + j] += av * bv;
      }
    }
  }
#endif
}

// Reverse-mode record of primitive operations, rebuilt per training step.
// Append order is topological: inputs always precede consumers.
class ComputationRecord {
 public:
  struct NodeSlot {
    int rows = 0;
    int cols = 0;
    std::vector<double> grad;  // allocated lazily
  };

  struct OpStep {
    const char* kind;
    int out;
    std::function<void(ComputationRecord&)> backward;
  };

  // registers an existing value as a leaf (typically a parameter)
  void watch(Tensor& t) {
    t.node = new_node(t.rows, t.cols);
  }

  int new_node(int rows, int cols) {
    nodes_.push_back(NodeSlot{rows, cols, {}});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void push(const char* kind, int out, std::function<void(ComputationRecord&)> backward) {
    steps_.push_back(OpStep{kind, out, std::move(backward)});
  }

  // gradient buffer for a node, zero-initialised on first touch
  std::vector<double>& grad(int node) {
    NodeSlot& s = nodes_.at(static_cast<std::size_t>(node));
    if (s.grad.empty()) s.grad.assign(static_cast<std::size_t>(s.rows) * s.cols, 0.0);
    return s.grad;
  }

  bool has_grad(int node) const {
    return !nodes_.at(static_cast<std::size_t>(node)).grad.empty();
  }

  // Reverse sweep from a scalar loss. Gradients of leaves stay readable
  // until clear(); callers harvest them right after.
  void backward(const Tensor& loss) {
    if (loss.node < 0) throw std::invalid_argument("backward: loss is not on the record");
    if (!loss.is_scalar()) throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape_str());
    grad(loss.node)[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      // skip ops whose output never received gradient; they cannot
      // influence the loss
      if (!has_grad(it->out)) continue;
      it->backward(*this);
    }
  }

  void clear() {
    steps_.clear();
    nodes_.clear();
  }

  std::size_t size() const { return steps_.size(); }

 private:
  std::vector<NodeSlot> nodes_;
  std::vector<OpStep> steps_;
};

}  // namespace cotrain::diff
