#pragma once

// AdamW with bias correction, decoupled weight decay, global-norm gradient
// clipping, and linear learning-rate warmup from zero.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/params.hpp"

namespace atompatch {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  long warmup_steps = 100;  // 0 disables warmup

  void validate() const {
    if (lr <= 0.0) throw Error("optimizer lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw Error("optimizer betas must be in [0,1)");
    }
    if (eps <= 0.0) throw Error("optimizer eps must be positive");
    if (weight_decay < 0.0) throw Error("optimizer weight decay must be non-negative");
    if (warmup_steps < 0) throw Error("optimizer warmup must be non-negative");
  }
};

struct StepInfo {
  double lr = 0.0;          // effective (post-warmup) learning rate
  double grad_norm = 0.0;   // pre-clip global norm
  bool clipped = false;
};

/// Optimizes the parameters of one registry subset. Moment state is kept per
/// parameter tensor in registration order; the step count is 1-based.
class AdamW {
 public:
  AdamW(ParamRegistry params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    m_.resize(params_.items.size());
    v_.resize(params_.items.size());
    for (std::size_t i = 0; i < params_.items.size(); ++i) {
      m_[i].assign(params_.items[i].second.size(), 0.0);
      v_[i].assign(params_.items[i].second.size(), 0.0);
    }
  }

  const ParamRegistry& params() const { return params_; }
  long step_count() const { return t_; }

  void zero_grad() { params_.zero_grad(); }

  /// One update from the gradients currently held by the parameters.
  StepInfo step() {
    // Global norm over every parameter; any non-finite gradient is fatal.
    double sq = 0.0;
    for (auto& it : params_.items) {
      for (double g : it.second.grad()) {
        if (!std::isfinite(g)) {
          throw Error("non-finite gradient in parameter " + it.first);
        }
        sq += g * g;
      }
    }
    StepInfo info;
    info.grad_norm = std::sqrt(sq);
    double gscale = 1.0;
    if (cfg_.clip_norm > 0.0 && info.grad_norm > cfg_.clip_norm) {
      gscale = cfg_.clip_norm / info.grad_norm;
      info.clipped = true;
    }

    ++t_;
    double lr = cfg_.lr;
    if (cfg_.warmup_steps > 0 && t_ < cfg_.warmup_steps) {
      lr *= static_cast<double>(t_) / static_cast<double>(cfg_.warmup_steps);
    }
    info.lr = lr;

    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.items.size(); ++i) {
      auto& p = params_.items[i].second;
      auto& pd = p.data();
      const auto& pg = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < pd.size(); ++j) {
        const double g = pg[j] * gscale;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        pd[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * pd[j]);
      }
    }
    return info;
  }

 private:
  ParamRegistry params_;
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace atompatch
