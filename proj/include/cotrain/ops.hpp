// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotrain/tensor.hpp"

// Primitive forward ops. Each records a backward closure on `rec` whenever
// some input is on the record; constant inputs (node < 0) receive no
// gradient. Passing rec == nullptr evaluates pure.

namespace cotrain::diff {

namespace detail {

inline bool want_record(const ComputationRecord* rec, std::initializer_list<const Tensor*> ins) {
  if (!rec) return false;
  for (const Tensor* t : ins)
    if (t->node >= 0) return true;
  return false;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
}

}  // namespace detail

inline Tensor matmul(ComputationRecord* rec, const Tensor& a, const Tensor& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("matmul: inner dimensions disagree " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor out(a.rows, b.cols);
  gemm(false, false, a.rows, b.cols, a.cols, 1.0, a.ptr(), a.cols, b.ptr(), b.cols, 0.0, out.mut(),
       out.cols);
  check_finite(out, "matmul");
  if (detail::want_record(rec, {&a, &b})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, bn = b.node, on = out.node;
    const Tensor ac = a, bc = b;
    rec->push("matmul", on, [an, bn, on, ac, bc](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      if (an >= 0)  // dA += G * B^T
        gemm(false, true, ac.rows, ac.cols, bc.cols, 1.0, g.data(), bc.cols, bc.ptr(), bc.cols, 1.0,
             r.grad(an).data(), ac.cols);
      if (bn >= 0)  // dB += A^T * G
        gemm(true, false, bc.rows, bc.cols, ac.rows, 1.0, ac.ptr(), ac.cols, g.data(), bc.cols, 1.0,
             r.grad(bn).data(), bc.cols);
    });
  }
  return out;
}

inline Tensor transpose(ComputationRecord* rec, const Tensor& a) {
  Tensor out(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, on = out.node;
    const int r0 = a.rows, c0 = a.cols;
    rec->push("transpose", on, [an, on, r0, c0](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& ga = r.grad(an);
      for (int i = 0; i < r0; ++i)
        for (int j = 0; j < c0; ++j)
          ga[static_cast<std::size_t>(i) * c0 + j] += g[static_cast<std::size_t>(j) * r0 + i];
    });
  }
  return out;
}

inline Tensor add(ComputationRecord* rec, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.rows, a.cols);
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.mut();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "add");
  if (detail::want_record(rec, {&a, &b})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, bn = b.node, on = out.node;
    rec->push("add", on, [an, bn, on](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      if (an >= 0) {
        std::vector<double>& ga = r.grad(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        std::vector<double>& gb = r.grad(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(ComputationRecord* rec, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.rows, a.cols);
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.mut();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  check_finite(out, "sub");
  if (detail::want_record(rec, {&a, &b})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, bn = b.node, on = out.node;
    rec->push("sub", on, [an, bn, on](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      if (an >= 0) {
        std::vector<double>& ga = r.grad(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        std::vector<double>& gb = r.grad(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(ComputationRecord* rec, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.rows, a.cols);
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.mut();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  check_finite(out, "mul");
  if (detail::want_record(rec, {&a, &b})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, bn = b.node, on = out.node;
    const Tensor ac = a, bc = b;
    rec->push("mul", on, [an, bn, on, ac, bc](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      if (an >= 0) {
        std::vector<double>& ga = r.grad(an);
        const double* pb2 = bc.ptr();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb2[i];
      }
      if (bn >= 0) {
        std::vector<double>& gb = r.grad(bn);
        const double* pa2 = ac.ptr();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

inline Tensor scale(ComputationRecord* rec, const Tensor& a, double c) {
  Tensor out(a.rows, a.cols);
  const double* pa = a.ptr();
  double* po = out.mut();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  check_finite(out, "scale");
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, on = out.node;
    rec->push("scale", on, [an, on, c](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& ga = r.grad(an);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

// a[m x n] + v broadcast over rows, v is 1 x n
inline Tensor add_rowvec(ComputationRecord* rec, const Tensor& a, const Tensor& v) {
  if (v.rows != 1 || v.cols != a.cols)
    throw std::invalid_argument("add_rowvec: " + a.shape_str() + " vs " + v.shape_str());
  Tensor out(a.rows, a.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out.at(i, j) = a.at(i, j) + v.at(0, j);
  check_finite(out, "add_rowvec");
  if (detail::want_record(rec, {&a, &v})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, vn = v.node, on = out.node;
    const int m = a.rows, n = a.cols;
    rec->push("add_rowvec", on, [an, vn, on, m, n](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      if (an >= 0) {
        std::vector<double>& ga = r.grad(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (vn >= 0) {
        std::vector<double>& gv = r.grad(vn);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gv[j] += g[static_cast<std::size_t>(i) * n + j];
      }
    });
  }
  return out;
}

// v[1 x d] repeated m times -> [m x d]
inline Tensor tile_rows(ComputationRecord* rec, const Tensor& v, int m) {
  if (v.rows != 1) throw std::invalid_argument("tile_rows: expected row vector, got " + v.shape_str());
  Tensor out(m, v.cols);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < v.cols; ++j) out.at(i, j) = v.at(0, j);
  if (detail::want_record(rec, {&v})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int vn = v.node, on = out.node;
    const int d = v.cols;
    rec->push("tile_rows", on, [vn, on, m, d](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& gv = r.grad(vn);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) gv[j] += g[static_cast<std::size_t>(i) * d + j];
    });
  }
  return out;
}

inline Tensor concat_cols(ComputationRecord* rec, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  int total = 0;
  const int m = parts.front().rows;
  for (const Tensor& t : parts) {
    if (t.rows != m) throw std::invalid_argument("concat_cols: row mismatch " + t.shape_str());
    total += t.cols;
  }
  Tensor out(m, total);
  int off = 0;
  for (const Tensor& t : parts) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < t.cols; ++j) out.at(i, off + j) = t.at(i, j);
    off += t.cols;
  }
  bool record = rec != nullptr &&
                std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.node >= 0; });
  if (record) {
    out.node = rec->new_node(out.rows, out.cols);
    const int on = out.node;
    std::vector<int> node_ids, widths;
    for (const Tensor& t : parts) {
      node_ids.push_back(t.node);
      widths.push_back(t.cols);
    }
    rec->push("concat_cols", on, [on, m, total, node_ids, widths](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      int off2 = 0;
      for (std::size_t p = 0; p < node_ids.size(); ++p) {
        if (node_ids[p] >= 0) {
          std::vector<double>& gp = r.grad(node_ids[p]);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < widths[p]; ++j)
              gp[static_cast<std::size_t>(i) * widths[p] + j] +=
                  g[static_cast<std::size_t>(i) * total + off2 + j];
        }
        off2 += widths[p];
      }
    });
  }
  return out;
}

inline Tensor slice_cols(ComputationRecord* rec, const Tensor& a, int start, int len) {
  if (start < 0 || len <= 0 || start + len > a.cols)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of " + a.shape_str());
  Tensor out(a.rows, len);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < len; ++j) out.at(i, j) = a.at(i, start + j);
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, on = out.node;
    const int m = a.rows, n = a.cols;
    rec->push("slice_cols", on, [an, on, m, n, start, len](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& ga = r.grad(an);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j)
          ga[static_cast<std::size_t>(i) * n + start + j] += g[static_cast<std::size_t>(i) * len + j];
    });
  }
  return out;
}

inline Tensor concat_rows(ComputationRecord* rec, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int d = parts.front().cols;
  int total = 0;
  for (const Tensor& t : parts) {
    if (t.cols != d) throw std::invalid_argument("concat_rows: column mismatch " + t.shape_str());
    total += t.rows;
  }
  Tensor out(total, d);
  int off = 0;
  for (const Tensor& t : parts) {
    std::copy(t.ptr(), t.ptr() + t.numel(), out.mut() + static_cast<std::size_t>(off) * d);
    off += t.rows;
  }
  bool record = rec != nullptr &&
                std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.node >= 0; });
  if (record) {
    out.node = rec->new_node(out.rows, out.cols);
    const int on = out.node;
    std::vector<int> node_ids, heights;
    for (const Tensor& t : parts) {
      node_ids.push_back(t.node);
      heights.push_back(t.rows);
    }
    rec->push("concat_rows", on, [on, d, node_ids, heights](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      int off2 = 0;
      for (std::size_t p = 0; p < node_ids.size(); ++p) {
        if (node_ids[p] >= 0) {
          std::vector<double>& gp = r.grad(node_ids[p]);
          for (std::size_t i = 0; i < gp.size(); ++i)
            gp[i] += g[static_cast<std::size_t>(off2) * d + i];
        }
        off2 += heights[p];
      }
    });
  }
  return out;
}

// out[i] = a[ids[i]]; duplicate ids accumulate gradient (embedding lookup)
inline Tensor gather_rows(ComputationRecord* rec, const Tensor& a, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("gather_rows: empty index list");
  for (int id : ids)
    if (id < 0 || id >= a.rows)
      throw std::invalid_argument("gather_rows: index " + std::to_string(id) + " out of " +
                                  a.shape_str());
  Tensor out(static_cast<int>(ids.size()), a.cols);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(a.ptr() + static_cast<std::size_t>(ids[i]) * a.cols,
              a.ptr() + static_cast<std::size_t>(ids[i] + 1) * a.cols,
              out.mut() + i * a.cols);
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, on = out.node;
    const int d = a.cols;
    const std::vector<int> idc = ids;
    rec->push("gather_rows", on, [an, on, d, idc](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& ga = r.grad(an);
      for (std::size_t i = 0; i < idc.size(); ++i)
        for (int j = 0; j < d; ++j)
          ga[static_cast<std::size_t>(idc[i]) * d + j] += g[i * static_cast<std::size_t>(d) + j];
    });
  }
  return out;
}

inline Tensor mean_rows(ComputationRecord* rec, const Tensor& a) {
  Tensor out(1, a.cols);
  for (int j = 0; j < a.cols; ++j) {
    double s = 0.0;
    for (int i = 0; i < a.rows; ++i) s += a.at(i, j);
    out.at(0, j) = s / a.rows;
  }
  check_finite(out, "mean_rows");
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, on = out.node;
    const int m = a.rows, d = a.cols;
    rec->push("mean_rows", on, [an, on, m, d](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& ga = r.grad(an);
      const double inv = 1.0 / m;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) ga[static_cast<std::size_t>(i) * d + j] += g[j] * inv;
    });
  }
  return out;
}

inline Tensor sum_all(ComputationRecord* rec, const Tensor& a) {
  double s = 0.0;
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < a.numel(); ++i) s += pa[i];
  Tensor out = Tensor::scalar(s);
  check_finite(out, "sum_all");
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(1, 1);
    const int an = a.node, on = out.node;
    rec->push("sum_all", on, [an, on](ComputationRecord& r) {
      const double g = r.grad(on)[0];
      std::vector<double>& ga = r.grad(an);
      for (double& v : ga) v += g;
    });
  }
  return out;
}

inline Tensor mean_all(ComputationRecord* rec, const Tensor& a) {
  return scale(rec, sum_all(rec, a), 1.0 / static_cast<double>(a.numel()));
}

// row-wise softmax with max subtraction
inline Tensor softmax_rows(ComputationRecord* rec, const Tensor& a) {
  Tensor out(a.rows, a.cols);
  for (int i = 0; i < a.rows; ++i) {
    double mx = a.at(i, 0);
    for (int j = 1; j < a.cols; ++j) mx = std::max(mx, a.at(i, j));
    double s = 0.0;
    for (int j = 0; j < a.cols; ++j) {
      double e = std::exp(a.at(i, j) - mx);
      out.at(i, j) = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < a.cols; ++j) out.at(i, j) *= inv;
  }
  check_finite(out, "softmax");
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, on = out.node;
    const Tensor y = out.detached();
    rec->push("softmax", on, [an, on, y](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& ga = r.grad(an);
      for (int i = 0; i < y.rows; ++i) {
        double dot = 0.0;
        for (int j = 0; j < y.cols; ++j)
          dot += g[static_cast<std::size_t>(i) * y.cols + j] * y.at(i, j);
        for (int j = 0; j < y.cols; ++j) {
          const std::size_t k = static_cast<std::size_t>(i) * y.cols + j;
          ga[k] += (g[k] - dot) * y.at(i, j);
        }
      }
    });
  }
  return out;
}

// per-row normalisation to zero mean / unit variance, then affine
inline Tensor layer_norm(ComputationRecord* rec, const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = 1e-5) {
  if (gain.rows != 1 || gain.cols != x.cols || bias.rows != 1 || bias.cols != x.cols)
    throw std::invalid_argument("layer_norm: affine shape mismatch " + x.shape_str() + " vs " +
                                gain.shape_str() + ", " + bias.shape_str());
  const int m = x.rows, d = x.cols;
  Tensor out(m, d);
  Tensor xhat(m, d);
  std::vector<double> inv_std(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x.at(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = x.at(i, j) - mean;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      const double h = (x.at(i, j) - mean) * is;
      xhat.at(i, j) = h;
      out.at(i, j) = h * gain.at(0, j) + bias.at(0, j);
    }
  }
  check_finite(out, "layer_norm");
  if (detail::want_record(rec, {&x, &gain, &bias})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int xn = x.node, gn = gain.node, bn = bias.node, on = out.node;
    const Tensor xh = xhat, gc = gain;
    const std::vector<double> is = inv_std;
    rec->push("layer_norm", on, [xn, gn, bn, on, xh, gc, is, m, d](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      if (gn >= 0) {
        std::vector<double>& gg = r.grad(gn);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < d; ++j)
            gg[j] += g[static_cast<std::size_t>(i) * d + j] * xh.at(i, j);
      }
      if (bn >= 0) {
        std::vector<double>& gb = r.grad(bn);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < d; ++j) gb[j] += g[static_cast<std::size_t>(i) * d + j];
      }
      if (xn >= 0) {
        std::vector<double>& gx = r.grad(xn);
        for (int i = 0; i < m; ++i) {
          double mean_gh = 0.0, mean_ghh = 0.0;
          for (int j = 0; j < d; ++j) {
            const double gh = g[static_cast<std::size_t>(i) * d + j] * gc.at(0, j);
            mean_gh += gh;
            mean_ghh += gh * xh.at(i, j);
          }
          mean_gh /= d;
          mean_ghh /= d;
          for (int j = 0; j < d; ++j) {
            const double gh = g[static_cast<std::size_t>(i) * d + j] * gc.at(0, j);
            gx[static_cast<std::size_t>(i) * d + j] +=
                (gh - mean_gh - xh.at(i, j) * mean_ghh) * is[static_cast<std::size_t>(i)];
          }
        }
      }
    });
  }
  return out;
}

// smooth gelu (tanh approximation)
inline Tensor gelu(ComputationRecord* rec, const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor out(a.rows, a.cols);
  const double* pa = a.ptr();
  double* po = out.mut();
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = pa[i];
    po[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  check_finite(out, "gelu");
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, on = out.node;
    const Tensor ac = a;
    rec->push("gelu", on, [an, on, ac](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& ga = r.grad(an);
      const double* px = ac.ptr();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = px[i];
        const double t = std::tanh(kC * (x + kA * x * x * x));
        const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
        ga[i] += g[i] * d;
      }
    });
  }
  return out;
}

inline Tensor exp(ComputationRecord* rec, const Tensor& a) {
  Tensor out(a.rows, a.cols);
  const double* pa = a.ptr();
  double* po = out.mut();
  for (std::size_t i = 0; i < a.numel(); ++i) po[i] = std::exp(pa[i]);
  check_finite(out, "exp");
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, on = out.node;
    const Tensor y = out.detached();
    rec->push("exp", on, [an, on, y](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& ga = r.grad(an);
      const double* py = y.ptr();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * py[i];
    });
  }
  return out;
}

// clamp with unit gradient strictly inside the range, zero outside
inline Tensor clamp(ComputationRecord* rec, const Tensor& a, double lo, double hi) {
  Tensor out(a.rows, a.cols);
  const double* pa = a.ptr();
  double* po = out.mut();
  for (std::size_t i = 0; i < a.numel(); ++i) po[i] = std::min(hi, std::max(lo, pa[i]));
  if (detail::want_record(rec, {&a})) {
    out.node = rec->new_node(out.rows, out.cols);
    const int an = a.node, on = out.node;
    const Tensor ac = a;
    rec->push("clamp", on, [an, on, ac, lo, hi](ComputationRecord& r) {
      const std::vector<double>& g = r.grad(on);
      std::vector<double>& ga = r.grad(an);
      const double* px = ac.ptr();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (px[i] > lo && px[i] < hi) ga[i] += g[i];
    });
  }
  return out;
}

// mean negative log-softmax of targets over unmasked rows
inline Tensor cross_entropy(ComputationRecord* rec, const Tensor& logits,
                            const std::vector<int>& targets, const std::vector<bool>& mask) {
  const int p = logits.rows, v = logits.cols;
  if (static_cast<int>(targets.size()) != p || static_cast<int>(mask.size()) != p)
    throw std::invalid_argument("cross_entropy: target/mask length vs logits " + logits.shape_str());
  int n_active = 0;
  for (int i = 0; i < p; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || targets[i] >= v)
      throw std::invalid_argument("cross_entropy: target id " + std::to_string(targets[i]) +
                                  " outside vocabulary of " + std::to_string(v));
    ++n_active;
  }
  if (n_active == 0) throw std::invalid_argument("cross_entropy: no unmasked positions");
  double total = 0.0;
  for (int i = 0; i < p; ++i) {
    if (!mask[i]) continue;
    double mx = logits.at(i, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(i, j));
    double s = 0.0;
    for (int j = 0; j < v; ++j) s += std::exp(logits.at(i, j) - mx);
    total += (mx + std::log(s)) - logits.at(i, targets[i]);
  }
  Tensor out = Tensor::scalar(total / n_active);
  check_finite(out, "cross_entropy");
  if (detail::want_record(rec, {&logits})) {
    out.node = rec->new_node(1, 1);
    const int ln = logits.node, on = out.node;
    const Tensor lc = logits;
    const std::vector<int> tc = targets;
    const std::vector<bool> mc = mask;
    rec->push("cross_entropy", on, [ln, on, lc, tc, mc, n_active](ComputationRecord& r) {
      const double g = r.grad(on)[0] / n_active;
      std::vector<double>& gl = r.grad(ln);
      const int v2 = lc.cols;
      for (int i = 0; i < lc.rows; ++i) {
        if (!mc[static_cast<std::size_t>(i)]) continue;
        double mx = lc.at(i, 0);
        for (int j = 1; j < v2; ++j) mx = std::max(mx, lc.at(i, j));
        double s = 0.0;
        for (int j = 0; j < v2; ++j) s += std::exp(lc.at(i, j) - mx);
        const double inv = 1.0 / s;
        for (int j = 0; j < v2; ++j) {
          double p_ij = std::exp(lc.at(i, j) - mx) * inv;
          if (j == tc[static_cast<std::size_t>(i)]) p_ij -= 1.0;
          gl[static_cast<std::size_t>(i) * v2 + j] += g * p_ij;
        }
      }
    });
  }
  return out;
}

// mean of a list of scalar tensors (builds an add chain)
inline Tensor mean_scalars(ComputationRecord* rec, const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_scalars: empty input");
  Tensor acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(rec, acc, xs[i]);
  return scale(rec, acc, 1.0 / static_cast<double>(xs.size()));
}

}  // namespace cotrain::diff
