#pragma once

// Fused network ops: softmax / log-softmax over the last axis, layer norm,
// radial-basis expansion of distances, dropout, and a small attention helper.
// Each records a single backward closure using the standard closed forms.

#include <cmath>
#include <cstdint>
#include <vector>

#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/ops.hpp"
#include "atompatch/core/rng.hpp"

namespace atompatch {

inline constexpr double kPi = 3.14159265358979323846;

/// Row-wise softmax of x / temperature over the last axis. Rank 1 is a single
/// row. Max-shifted for stability; rows sum to 1 up to rounding.
inline DiffArray softmax(const DiffArray& x, double temperature = 1.0) {
  if (temperature <= 0.0) throw Error("softmax temperature must be positive");
  if (x.rank() != 1 && x.rank() != 2) throw Error("softmax: rank must be 1 or 2");
  const std::size_t n = (x.rank() == 2) ? x.rows() : 1;
  const std::size_t m = (x.rank() == 2) ? x.cols() : x.size();
  if (m == 0) throw Error("empty softmax axis");
  std::vector<double> v(n * m);
  const double inv_t = 1.0 / temperature;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data().data() + i * m;
    double mx = row[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double e = std::exp((row[j] - mx) * inv_t);
      v[i * m + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] /= z;
  }
  DiffArray y(x.shape(), std::move(v), x.requires_grad());
  if (Tape::recording() && y.requires_grad()) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn, n, m, inv_t] {
      yn->ensure_grad();
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double* yv = yn->value.data() + i * m;
        const double* gy = yn->grad.data() + i * m;
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += gy[j] * yv[j];
        double* gx = xn->grad.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) gx[j] += inv_t * yv[j] * (gy[j] - dot);
      }
    });
  }
  return y;
}

/// Row-wise log-softmax over the last axis (temperature 1).
inline DiffArray log_softmax(const DiffArray& x) {
  if (x.rank() != 1 && x.rank() != 2) throw Error("log_softmax: rank must be 1 or 2");
  const std::size_t n = (x.rank() == 2) ? x.rows() : 1;
  const std::size_t m = (x.rank() == 2) ? x.cols() : x.size();
  if (m == 0) throw Error("empty softmax axis");
  std::vector<double> v(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data().data() + i * m;
    double mx = row[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] = row[j] - lse;
  }
  DiffArray y(x.shape(), std::move(v), x.requires_grad());
  if (Tape::recording() && y.requires_grad()) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn, n, m] {
      yn->ensure_grad();
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double* yv = yn->value.data() + i * m;
        const double* gy = yn->grad.data() + i * m;
        double gsum = 0.0;
        for (std::size_t j = 0; j < m; ++j) gsum += gy[j];
        double* gx = xn->grad.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) gx[j] += gy[j] - std::exp(yv[j]) * gsum;
      }
    });
  }
  return y;
}

/// Per-row layer norm with learned gain/bias over the feature axis.
/// Variance is the population variance of the row.
inline DiffArray layer_norm(const DiffArray& x, const DiffArray& gain, const DiffArray& bias,
                            double eps = 1e-5) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t n = x.rows(), m = x.cols();
  if (gain.size() != m || bias.size() != m) {
    throw Error("layer_norm: gain/bias size must match feature dim " + std::to_string(m));
  }
  std::vector<double> v(n * m);
  std::vector<double> inv_sd(n), mean(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data().data() + i * m;
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += row[j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(m);
    const double s = 1.0 / std::sqrt(var + eps);
    mean[i] = mu;
    inv_sd[i] = s;
    for (std::size_t j = 0; j < m; ++j)
      v[i * m + j] = gain.data()[j] * (row[j] - mu) * s + bias.data()[j];
  }
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  DiffArray y(x.shape(), std::move(v), rg);
  if (Tape::recording() && rg) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), yn = y.node();
    Tape::current()->record([xn, gn, bn, yn, n, m, mean, inv_sd] {
      yn->ensure_grad();
      const double dm = static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = xn->value.data() + i * m;
        const double* gy = yn->grad.data() + i * m;
        const double s = inv_sd[i], mu = mean[i];
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (std::size_t j = 0; j < m; ++j) gn->grad[j] += gy[j] * (row[j] - mu) * s;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t j = 0; j < m; ++j) bn->grad[j] += gy[j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          // dL/dc_j with c = x - mu, then subtract the row mean of dc.
          double dot_c = 0.0;  // sum_k gy_k * gain_k * c_k
          for (std::size_t j = 0; j < m; ++j)
            dot_c += gy[j] * gn->value[j] * (row[j] - mu);
          const double ds_term = -0.5 * s * s * s * dot_c;  // dL/d(sigma^2)
          double dc_sum = 0.0;
          std::vector<double> dc(m);
          for (std::size_t j = 0; j < m; ++j) {
            dc[j] = gy[j] * gn->value[j] * s + ds_term * 2.0 * (row[j] - mu) / dm;
            dc_sum += dc[j];
          }
          double* gx = xn->grad.data() + i * m;
          for (std::size_t j = 0; j < m; ++j) gx[j] += dc[j] - dc_sum / dm;
        }
      }
    });
  }
  return y;
}

/// Gaussian radial basis expansion of distances with a cosine cutoff envelope.
/// Centers are uniform on [0, cutoff]; width is tied to the center spacing.
/// The envelope takes the features smoothly to zero at the cutoff.
inline DiffArray rbf_expand(const DiffArray& d, std::size_t count, double cutoff) {
  if (d.rank() != 1) throw Error("rbf_expand: distances must be rank 1");
  if (count < 2) throw Error("rbf_expand: need at least 2 bases");
  if (cutoff <= 0.0) throw Error("rbf_expand: cutoff must be positive");
  const std::size_t n = d.size();
  const double delta = cutoff / static_cast<double>(count - 1);
  const double gamma = 1.0 / (2.0 * delta * delta);
  std::vector<double> v(n * count);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = d.data()[i];
    const double env = (x < cutoff) ? 0.5 * (std::cos(kPi * x / cutoff) + 1.0) : 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      const double c = static_cast<double>(k) * delta;
      v[i * count + k] = env * std::exp(-gamma * (x - c) * (x - c));
    }
  }
  DiffArray y(Shape{n, count}, std::move(v), d.requires_grad());
  if (Tape::recording() && y.requires_grad()) {
    auto dn = d.node(), yn = y.node();
    Tape::current()->record([dn, yn, n, count, cutoff, delta, gamma] {
      yn->ensure_grad();
      dn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double x = dn->value[i];
        double env = 0.0, denv = 0.0;
        if (x < cutoff) {
          env = 0.5 * (std::cos(kPi * x / cutoff) + 1.0);
          denv = -0.5 * kPi / cutoff * std::sin(kPi * x / cutoff);
        }
        double acc = 0.0;
        for (std::size_t k = 0; k < count; ++k) {
          const double c = static_cast<double>(k) * delta;
          const double g = std::exp(-gamma * (x - c) * (x - c));
          const double dphi = denv * g + env * g * (-2.0 * gamma * (x - c));
          acc += yn->grad[i * count + k] * dphi;
        }
        dn->grad[i] += acc;
      }
    });
  }
  return y;
}

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
/// The mask is sampled once and captured as a constant, so forward and
/// backward see the same mask. p = 0 is the identity.
inline DiffArray dropout(const DiffArray& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout probability must be in [0,1)");
  if (p == 0.0) return x;
  std::vector<double> mv(x.size());
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& m : mv) m = (rng.uniform() >= p) ? keep_scale : 0.0;
  DiffArray mask(x.shape(), std::move(mv), /*requires_grad=*/false);
  return mul(x, mask);
}

/// Additive attention bias value for disallowed positions. Large enough that
/// exp underflows to exactly 0 after the max shift, so masked weights are
/// bit-zero in the normalized distribution.
inline constexpr double kAttnMaskBias = -1e30;

struct AttentionOut {
  DiffArray out;      // (n_q, d_v)
  DiffArray weights;  // (n_q, n_k), rows sum to 1
};

/// Scaled dot-product attention. `allowed` is an optional (n_q x n_k)
/// row-major 0/1 mask; a row with no allowed key is an error.
inline AttentionOut scaled_dot_attention(const DiffArray& q, const DiffArray& k,
                                         const DiffArray& v,
                                         const std::vector<std::uint8_t>& allowed = {}) {
  detail::require_rank2(q, "attention");
  detail::require_rank2(k, "attention");
  detail::require_rank2(v, "attention");
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols();
  if (k.cols() != d) throw Error("attention: query/key dim mismatch");
  if (v.rows() != nk) throw Error("attention: key/value count mismatch");
  if (!allowed.empty() && allowed.size() != nq * nk) {
    throw Error("attention: mask size mismatch");
  }
  DiffArray scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  if (!allowed.empty()) {
    std::vector<double> bias(nq * nk, 0.0);
    for (std::size_t i = 0; i < nq; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < nk; ++j) {
        if (allowed[i * nk + j]) {
          any = true;
        } else {
          bias[i * nk + j] = kAttnMaskBias;
        }
      }
      if (!any) throw Error("fully masked attention row");
    }
    scores = add(scores, DiffArray(Shape{nq, nk}, std::move(bias)));
  }
  AttentionOut result;
  result.weights = softmax(scores);
  result.out = matmul(result.weights, v);
  return result;
}

}  // namespace atompatch
