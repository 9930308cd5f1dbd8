#pragma once

// Differentiable array primitives. Every op computes its value eagerly and,
// when a Tape is active and the result requires grad, records one backward
// closure. Closures only accumulate into inputs whose requires_grad is set;
// requires_grad propagates through ops, so constants prune their subgraph.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"

namespace atompatch {

namespace detail {

inline void require_same_shape(const DiffArray& a, const DiffArray& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
}

inline void require_rank2(const DiffArray& a, const char* op) {
  if (a.rank() != 2) {
    throw Error(std::string(op) + ": expected rank-2 array, got " + shape_str(a.shape()));
  }
}

inline bool want_record(const DiffArray& out) {
  return Tape::recording() && out.requires_grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary

inline DiffArray add(const DiffArray& a, const DiffArray& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  DiffArray c(a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), bn = b.node(), cn = c.node();
    Tape::current()->record([an, bn, cn] {
      cn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i] += cn->grad[i];
      }
    });
  }
  return c;
}

inline DiffArray sub(const DiffArray& a, const DiffArray& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  DiffArray c(a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), bn = b.node(), cn = c.node();
    Tape::current()->record([an, bn, cn] {
      cn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i] -= cn->grad[i];
      }
    });
  }
  return c;
}

inline DiffArray mul(const DiffArray& a, const DiffArray& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  DiffArray c(a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), bn = b.node(), cn = c.node();
    Tape::current()->record([an, bn, cn] {
      cn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i)
          an->grad[i] += cn->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i)
          bn->grad[i] += cn->grad[i] * an->value[i];
      }
    });
  }
  return c;
}

inline DiffArray div(const DiffArray& a, const DiffArray& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] / b.data()[i];
  DiffArray c(a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), bn = b.node(), cn = c.node();
    Tape::current()->record([an, bn, cn] {
      cn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i)
          an->grad[i] += cn->grad[i] / bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < cn->grad.size(); ++i)
          bn->grad[i] -= cn->grad[i] * cn->value[i] / bn->value[i];
      }
    });
  }
  return c;
}

// ---------------------------------------------------------------------------
// scalar-argument elementwise

inline DiffArray scale(const DiffArray& a, double s) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
  DiffArray c(a.shape(), std::move(v), a.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), cn = c.node();
    Tape::current()->record([an, cn, s] {
      cn->ensure_grad();
      an->ensure_grad();
      for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i] * s;
    });
  }
  return c;
}

inline DiffArray add_scalar(const DiffArray& a, double s) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + s;
  DiffArray c(a.shape(), std::move(v), a.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), cn = c.node();
    Tape::current()->record([an, cn] {
      cn->ensure_grad();
      an->ensure_grad();
      for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
    });
  }
  return c;
}

inline DiffArray neg(const DiffArray& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// elementwise unary

namespace detail {

/// Shared scaffold: f(value) and df(value, out_value) -> local derivative.
template <typename F, typename DF>
DiffArray unary_op(const DiffArray& a, F f, DF df) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a.data()[i]);
  DiffArray c(a.shape(), std::move(v), a.requires_grad());
  if (want_record(c)) {
    auto an = a.node(), cn = c.node();
    Tape::current()->record([an, cn, df] {
      cn->ensure_grad();
      an->ensure_grad();
      for (std::size_t i = 0; i < cn->grad.size(); ++i)
        an->grad[i] += cn->grad[i] * df(an->value[i], cn->value[i]);
    });
  }
  return c;
}

}  // namespace detail

inline DiffArray exp_(const DiffArray& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline DiffArray log_(const DiffArray& a) {
  return detail::unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline DiffArray sqrt_(const DiffArray& a) {
  return detail::unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline DiffArray reciprocal(const DiffArray& a) {
  return detail::unary_op(
      a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

/// |x|; subgradient at 0 is taken as 0.
inline DiffArray abs_(const DiffArray& a) {
  return detail::unary_op(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline DiffArray silu(const DiffArray& a) {
  return detail::unary_op(
      a,
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return x * s;
      },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

/// Exact Gaussian-CDF form: x * Phi(x).
inline DiffArray gelu(const DiffArray& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return detail::unary_op(
      a,
      [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [=](double x, double) {
        const double phi_cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double phi_pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        return phi_cdf + x * phi_pdf;
      });
}

// ---------------------------------------------------------------------------
// broadcast across rows/cols of a rank-2 array

/// X (n,m) + r (m), broadcast over rows.
inline DiffArray add_row(const DiffArray& x, const DiffArray& r) {
  detail::require_rank2(x, "add_row");
  const std::size_t n = x.rows(), m = x.cols();
  if (r.rank() != 1 || r.size() != m) {
    throw Error("add_row: vector shape " + shape_str(r.shape()) + " does not match cols " +
                std::to_string(m));
  }
  std::vector<double> v(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] = x.data()[i * m + j] + r.data()[j];
  DiffArray c(x.shape(), std::move(v), x.requires_grad() || r.requires_grad());
  if (detail::want_record(c)) {
    auto xn = x.node(), rn = r.node(), cn = c.node();
    Tape::current()->record([xn, rn, cn, n, m] {
      cn->ensure_grad();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n * m; ++i) xn->grad[i] += cn->grad[i];
      }
      if (rn->requires_grad) {
        rn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) rn->grad[j] += cn->grad[i * m + j];
      }
    });
  }
  return c;
}

/// X (n,m) * r (m), broadcast over rows.
inline DiffArray mul_row(const DiffArray& x, const DiffArray& r) {
  detail::require_rank2(x, "mul_row");
  const std::size_t n = x.rows(), m = x.cols();
  if (r.rank() != 1 || r.size() != m) {
    throw Error("mul_row: vector shape " + shape_str(r.shape()) + " does not match cols " +
                std::to_string(m));
  }
  std::vector<double> v(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] = x.data()[i * m + j] * r.data()[j];
  DiffArray c(x.shape(), std::move(v), x.requires_grad() || r.requires_grad());
  if (detail::want_record(c)) {
    auto xn = x.node(), rn = r.node(), cn = c.node();
    Tape::current()->record([xn, rn, cn, n, m] {
      cn->ensure_grad();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            xn->grad[i * m + j] += cn->grad[i * m + j] * rn->value[j];
      }
      if (rn->requires_grad) {
        rn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            rn->grad[j] += cn->grad[i * m + j] * xn->value[i * m + j];
      }
    });
  }
  return c;
}

/// X (n,m) + c (n), broadcast over columns.
inline DiffArray add_col(const DiffArray& x, const DiffArray& cvec) {
  detail::require_rank2(x, "add_col");
  const std::size_t n = x.rows(), m = x.cols();
  if (cvec.rank() != 1 || cvec.size() != n) {
    throw Error("add_col: vector shape " + shape_str(cvec.shape()) + " does not match rows " +
                std::to_string(n));
  }
  std::vector<double> v(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] = x.data()[i * m + j] + cvec.data()[i];
  DiffArray c(x.shape(), std::move(v), x.requires_grad() || cvec.requires_grad());
  if (detail::want_record(c)) {
    auto xn = x.node(), vn = cvec.node(), cn = c.node();
    Tape::current()->record([xn, vn, cn, n, m] {
      cn->ensure_grad();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n * m; ++i) xn->grad[i] += cn->grad[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) vn->grad[i] += cn->grad[i * m + j];
      }
    });
  }
  return c;
}

/// X (n,m) * c (n), broadcast over columns.
inline DiffArray mul_col(const DiffArray& x, const DiffArray& cvec) {
  detail::require_rank2(x, "mul_col");
  const std::size_t n = x.rows(), m = x.cols();
  if (cvec.rank() != 1 || cvec.size() != n) {
    throw Error("mul_col: vector shape " + shape_str(cvec.shape()) + " does not match rows " +
                std::to_string(n));
  }
  std::vector<double> v(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] = x.data()[i * m + j] * cvec.data()[i];
  DiffArray c(x.shape(), std::move(v), x.requires_grad() || cvec.requires_grad());
  if (detail::want_record(c)) {
    auto xn = x.node(), vn = cvec.node(), cn = c.node();
    Tape::current()->record([xn, vn, cn, n, m] {
      cn->ensure_grad();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            xn->grad[i * m + j] += cn->grad[i * m + j] * vn->value[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            vn->grad[i] += cn->grad[i * m + j] * xn->value[i * m + j];
      }
    });
  }
  return c;
}

// ---------------------------------------------------------------------------
// linear algebra

inline DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw Error("matmul: inner dims mismatch " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
  }
  std::vector<double> v(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.data()[i * k + p];
      const double* brow = b.data().data() + p * m;
      double* crow = v.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
  DiffArray c(Shape{n, m}, std::move(v), a.requires_grad() || b.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), bn = b.node(), cn = c.node();
    Tape::current()->record([an, bn, cn, n, k, m] {
      cn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        // dA = dC * B^T
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = cn->grad.data() + i * m;
            const double* brow = bn->value.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
            an->grad[i * k + p] += acc;
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB = A^T * dC
        for (std::size_t i = 0; i < n; ++i) {
          const double* arow = an->value.data() + i * k;
          const double* grow = cn->grad.data() + i * m;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = arow[p];
            double* bgrow = bn->grad.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) bgrow[j] += aip * grow[j];
          }
        }
      }
    });
  }
  return c;
}

inline DiffArray transpose(const DiffArray& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> v(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[j * n + i] = a.data()[i * m + j];
  DiffArray c(Shape{m, n}, std::move(v), a.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), cn = c.node();
    Tape::current()->record([an, cn, n, m] {
      cn->ensure_grad();
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += cn->grad[j * n + i];
    });
  }
  return c;
}

// ---------------------------------------------------------------------------
// reductions

inline DiffArray sum_all(const DiffArray& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  DiffArray c = DiffArray::scalar(s, a.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), cn = c.node();
    Tape::current()->record([an, cn] {
      cn->ensure_grad();
      an->ensure_grad();
      for (auto& g : an->grad) g += cn->grad[0];
    });
  }
  return c;
}

inline DiffArray mean_all(const DiffArray& a) {
  if (a.size() == 0) throw Error("mean_all on empty array");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

/// Per-row sums of a rank-2 array: (n,m) -> (n).
inline DiffArray row_sums(const DiffArray& a) {
  detail::require_rank2(a, "row_sums");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> v(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[i] += a.data()[i * m + j];
  DiffArray c(Shape{n}, std::move(v), a.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), cn = c.node();
    Tape::current()->record([an, cn, n, m] {
      cn->ensure_grad();
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += cn->grad[i];
    });
  }
  return c;
}

/// Per-column sums of a rank-2 array: (n,m) -> (m).
inline DiffArray col_sums(const DiffArray& a) {
  detail::require_rank2(a, "col_sums");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> v(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[j] += a.data()[i * m + j];
  DiffArray c(Shape{m}, std::move(v), a.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), cn = c.node();
    Tape::current()->record([an, cn, n, m] {
      cn->ensure_grad();
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += cn->grad[j];
    });
  }
  return c;
}

// ---------------------------------------------------------------------------
// indexing / shape

/// Select rows by index; duplicates allowed (gradients accumulate).
/// Rank-1 input selects scalars.
inline DiffArray gather_rows(const DiffArray& x, const std::vector<std::size_t>& idx) {
  const std::size_t m = (x.rank() == 2) ? x.cols() : 1;
  const std::size_t n = x.rows();
  if (x.rank() != 1 && x.rank() != 2) throw Error("gather_rows: rank must be 1 or 2");
  std::vector<double> v(idx.size() * m);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw Error("gather_rows: index " + std::to_string(idx[r]) + " out of range");
    for (std::size_t j = 0; j < m; ++j) v[r * m + j] = x.data()[idx[r] * m + j];
  }
  Shape out_shape = (x.rank() == 2) ? Shape{idx.size(), m} : Shape{idx.size()};
  DiffArray c(std::move(out_shape), std::move(v), x.requires_grad());
  if (detail::want_record(c)) {
    auto xn = x.node(), cn = c.node();
    Tape::current()->record([xn, cn, idx, m] {
      cn->ensure_grad();
      xn->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < m; ++j)
          xn->grad[idx[r] * m + j] += cn->grad[r * m + j];
    });
  }
  return c;
}

/// out has n_rows rows; out[idx[r]] += src[r]. Rank follows src.
inline DiffArray scatter_add_rows(const DiffArray& src, const std::vector<std::size_t>& idx,
                                  std::size_t n_rows) {
  if (src.rank() != 1 && src.rank() != 2) throw Error("scatter_add_rows: rank must be 1 or 2");
  if (idx.size() != src.rows()) {
    throw Error("scatter_add_rows: index count " + std::to_string(idx.size()) +
                " does not match rows " + std::to_string(src.rows()));
  }
  const std::size_t m = (src.rank() == 2) ? src.cols() : 1;
  std::vector<double> v(n_rows * m, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n_rows) throw Error("scatter_add_rows: index out of range");
    for (std::size_t j = 0; j < m; ++j) v[idx[r] * m + j] += src.data()[r * m + j];
  }
  Shape out_shape = (src.rank() == 2) ? Shape{n_rows, m} : Shape{n_rows};
  DiffArray c(std::move(out_shape), std::move(v), src.requires_grad());
  if (detail::want_record(c)) {
    auto sn = src.node(), cn = c.node();
    Tape::current()->record([sn, cn, idx, m] {
      cn->ensure_grad();
      sn->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < m; ++j)
          sn->grad[r * m + j] += cn->grad[idx[r] * m + j];
    });
  }
  return c;
}

/// out[i] = x[i, cols[i]].
inline DiffArray pick_per_row(const DiffArray& x, const std::vector<std::size_t>& cols) {
  detail::require_rank2(x, "pick_per_row");
  const std::size_t n = x.rows(), m = x.cols();
  if (cols.size() != n) throw Error("pick_per_row: need one column index per row");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (cols[i] >= m) throw Error("pick_per_row: column index out of range");
    v[i] = x.data()[i * m + cols[i]];
  }
  DiffArray c(Shape{n}, std::move(v), x.requires_grad());
  if (detail::want_record(c)) {
    auto xn = x.node(), cn = c.node();
    Tape::current()->record([xn, cn, cols, m] {
      cn->ensure_grad();
      xn->ensure_grad();
      for (std::size_t i = 0; i < cols.size(); ++i)
        xn->grad[i * m + cols[i]] += cn->grad[i];
    });
  }
  return c;
}

inline DiffArray row_slice(const DiffArray& x, std::size_t start, std::size_t count) {
  detail::require_rank2(x, "row_slice");
  const std::size_t m = x.cols();
  if (start + count > x.rows()) throw Error("row_slice: range out of bounds");
  std::vector<double> v(count * m);
  std::copy(x.data().begin() + start * m, x.data().begin() + (start + count) * m, v.begin());
  DiffArray c(Shape{count, m}, std::move(v), x.requires_grad());
  if (detail::want_record(c)) {
    auto xn = x.node(), cn = c.node();
    Tape::current()->record([xn, cn, start, count, m] {
      cn->ensure_grad();
      xn->ensure_grad();
      for (std::size_t i = 0; i < count * m; ++i) xn->grad[start * m + i] += cn->grad[i];
    });
  }
  return c;
}

inline DiffArray col_slice(const DiffArray& x, std::size_t start, std::size_t count) {
  detail::require_rank2(x, "col_slice");
  const std::size_t n = x.rows(), m = x.cols();
  if (start + count > m) throw Error("col_slice: range out of bounds");
  std::vector<double> v(n * count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) v[i * count + j] = x.data()[i * m + start + j];
  DiffArray c(Shape{n, count}, std::move(v), x.requires_grad());
  if (detail::want_record(c)) {
    auto xn = x.node(), cn = c.node();
    Tape::current()->record([xn, cn, start, count, n, m] {
      cn->ensure_grad();
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count; ++j)
          xn->grad[i * m + start + j] += cn->grad[i * count + j];
    });
  }
  return c;
}

inline DiffArray hconcat(const DiffArray& a, const DiffArray& b) {
  detail::require_rank2(a, "hconcat");
  detail::require_rank2(b, "hconcat");
  if (a.rows() != b.rows()) throw Error("hconcat: row mismatch");
  const std::size_t n = a.rows(), p = a.cols(), q = b.cols();
  std::vector<double> v(n * (p + q));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a.data().begin() + i * p, a.data().begin() + (i + 1) * p, v.begin() + i * (p + q));
    std::copy(b.data().begin() + i * q, b.data().begin() + (i + 1) * q,
              v.begin() + i * (p + q) + p);
  }
  DiffArray c(Shape{n, p + q}, std::move(v), a.requires_grad() || b.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), bn = b.node(), cn = c.node();
    Tape::current()->record([an, bn, cn, n, p, q] {
      cn->ensure_grad();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < p; ++j)
            an->grad[i * p + j] += cn->grad[i * (p + q) + j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < q; ++j)
            bn->grad[i * q + j] += cn->grad[i * (p + q) + p + j];
      }
    });
  }
  return c;
}

inline DiffArray hconcat3(const DiffArray& a, const DiffArray& b, const DiffArray& c) {
  return hconcat(hconcat(a, b), c);
}

inline DiffArray vconcat(const std::vector<DiffArray>& parts) {
  if (parts.empty()) throw Error("vconcat: empty part list");
  const std::size_t m = parts[0].cols();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_rank2(p, "vconcat");
    if (p.cols() != m) throw Error("vconcat: column mismatch");
    total += p.rows();
    rg = rg || p.requires_grad();
  }
  std::vector<double> v(total * m);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), v.begin() + off);
    off += p.size();
  }
  DiffArray c(Shape{total, m}, std::move(v), rg);
  if (detail::want_record(c)) {
    std::vector<std::shared_ptr<detail::ArrayNode>> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    auto cn = c.node();
    Tape::current()->record([nodes, cn] {
      cn->ensure_grad();
      std::size_t off = 0;
      for (const auto& pn : nodes) {
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (std::size_t i = 0; i < pn->value.size(); ++i) pn->grad[i] += cn->grad[off + i];
        }
        off += pn->value.size();
      }
    });
  }
  return c;
}

/// Copying reshape; total element count must be preserved.
inline DiffArray reshape(const DiffArray& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw Error("reshape: size mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  DiffArray c(std::move(shape), a.data(), a.requires_grad());
  if (detail::want_record(c)) {
    auto an = a.node(), cn = c.node();
    Tape::current()->record([an, cn] {
      cn->ensure_grad();
      an->ensure_grad();
      for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
    });
  }
  return c;
}

}  // namespace atompatch
