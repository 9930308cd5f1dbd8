#pragma once

// Central finite-difference verification of taped gradients. The objective is
// re-evaluated with each leaf coordinate displaced by +/- h; no tape may be
// active during those evaluations. Relative error uses a unit floor in the
// denominator so near-zero derivatives are compared absolutely.
//
// Programs with data-dependent discrete choices (e.g. anchor selection) are
// only piecewise differentiable: the caller may supply a signature callback
// reporting the discrete decisions of the most recent evaluation, and the
// checker flags any coordinate whose displacement flips them.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"

namespace atompatch {

struct LeafCheck {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool discrete_stable = true;  // no perturbation flipped the discrete choices
};

struct GradCheckReport {
  std::vector<LeafCheck> leaves;
  double max_rel_err = 0.0;
  bool discrete_stable = true;

  bool pass(double tol) const { return discrete_stable && max_rel_err <= tol; }
};

struct GradCheckOptions {
  double h = 1e-4;
  /// Reports the discrete decisions of the most recent objective evaluation;
  /// empty means the program has none.
  std::function<std::uint64_t()> discrete_signature;
};

/// `objective` must be a pure function of the leaf data (and constants): it is
/// called repeatedly, inside a tape once for the analytic pass and with no
/// tape for every displaced evaluation.
inline GradCheckReport finite_diff_check(
    const std::function<DiffArray()>& objective,
    const std::vector<std::pair<std::string, DiffArray>>& leaves, GradCheckOptions opts = {}) {
  if (opts.h <= 0.0) throw Error("finite difference step must be positive");

  for (const auto& leaf : leaves) {
    if (!leaf.second.requires_grad()) {
      throw Error("gradcheck leaf '" + leaf.first + "' does not require grad");
    }
    const_cast<DiffArray&>(leaf.second).zero_grad();
  }

  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  std::uint64_t base_sig = 0;
  {
    Tape tape;
    DiffArray loss = objective();
    if (loss.size() != 1) throw Error("gradcheck objective must be scalar");
    if (!std::isfinite(loss.value())) throw Error("objective not finite");
    tape.backward(loss);
  }
  if (opts.discrete_signature) base_sig = opts.discrete_signature();
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) analytic.push_back(leaf.second.grad());

  auto eval = [&](std::uint64_t* sig) {
    DiffArray loss = objective();  // no tape active here
    if (!std::isfinite(loss.value())) throw Error("objective not finite");
    if (sig && opts.discrete_signature) *sig = opts.discrete_signature();
    return loss.value();
  };

  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    LeafCheck lc;
    lc.name = leaves[li].first;
    auto& data = const_cast<DiffArray&>(leaves[li].second).data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      std::uint64_t sig_hi = base_sig, sig_lo = base_sig;
      data[i] = keep + opts.h;
      const double f_hi = eval(&sig_hi);
      data[i] = keep - opts.h;
      const double f_lo = eval(&sig_lo);
      data[i] = keep;
      if (sig_hi != base_sig || sig_lo != base_sig) {
        // the difference quotient spans a discontinuity; not comparable
        lc.discrete_stable = false;
        continue;
      }
      const double numeric = (f_hi - f_lo) / (2.0 * opts.h);
      const double rel = std::fabs(analytic[li][i] - numeric) / std::max(1.0, std::fabs(numeric));
      if (rel >= lc.max_rel_err) {
        lc.max_rel_err = rel;
        lc.worst_index = i;
        lc.worst_analytic = analytic[li][i];
        lc.worst_numeric = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, lc.max_rel_err);
    report.discrete_stable = report.discrete_stable && lc.discrete_stable;
    report.leaves.push_back(std::move(lc));
  }
  return report;
}

}  // namespace atompatch
