#pragma once

// Region masking for encoder pretraining. Atoms are hidden in small
// edge-connected regions rather than independently, so the reconstruction
// task cannot be solved from immediate neighbors alone. Masking is
// deterministic per seed and stops at exactly ceil(fraction * N) atoms.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/rng.hpp"
#include "atompatch/model/encoder.hpp"

namespace atompatch {

struct MaskedBatch {
  /// Element classes with masked positions replaced by the mask id.
  std::vector<std::size_t> element_classes;
  std::vector<std::size_t> masked_atoms;  // ascending
  std::vector<std::size_t> type_targets;  // true class per masked atom
  /// Edges touching at least one masked atom, in batch edge order.
  std::vector<std::pair<std::size_t, std::size_t>> masked_edges;
  std::vector<double> dist_targets;                 // per masked edge
  std::vector<std::array<double, 3>> noised_dirs;   // unit(i->j) + eps
  std::vector<std::array<double, 3>> dir_noise;     // the eps to recover
};

inline MaskedBatch mask_regions(const BatchedGraph& b, double fraction, std::uint64_t seed,
                                std::size_t region_cap = 6, double noise_sigma = 0.1) {
  if (fraction <= 0.0 || fraction > 1.0) throw Error("mask fraction must be in (0,1]");
  if (region_cap == 0) throw Error("mask region cap must be positive");
  const std::size_t n = b.size();
  if (n == 0) throw Error("no masked atoms");
  const std::size_t target =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))));

  std::vector<std::vector<std::size_t>> adj(n);
  for (const auto& e : b.edges) {
    adj[e.first].push_back(e.second);
    adj[e.second].push_back(e.first);
  }

  Rng rng(seed);
  std::vector<char> masked(n, 0);
  std::size_t masked_count = 0;
  while (masked_count < target) {
    std::vector<std::size_t> pool;
    pool.reserve(n - masked_count);
    for (std::size_t i = 0; i < n; ++i) {
      if (!masked[i]) pool.push_back(i);
    }
    const std::size_t start = pool[rng.index(pool.size())];
    std::size_t budget = std::min(region_cap, target - masked_count);
    std::deque<std::size_t> frontier{start};
    std::vector<char> seen(n, 0);
    seen[start] = 1;
    while (!frontier.empty() && budget > 0) {
      const std::size_t a = frontier.front();
      frontier.pop_front();
      if (!masked[a]) {
        masked[a] = 1;
        ++masked_count;
        --budget;
      }
      for (std::size_t nb : adj[a]) {
        if (!seen[nb] && !masked[nb]) {
          seen[nb] = 1;
          frontier.push_back(nb);
        }
      }
    }
  }

  MaskedBatch out;
  out.element_classes = batch_element_classes(b);
  for (std::size_t i = 0; i < n; ++i) {
    if (masked[i]) {
      out.masked_atoms.push_back(i);
      out.type_targets.push_back(out.element_classes[i]);
      out.element_classes[i] = kMaskElementClass;
    }
  }
  if (out.masked_atoms.empty()) throw Error("no masked atoms");

  for (const auto& e : b.edges) {
    if (!masked[e.first] && !masked[e.second]) continue;
    const auto& a = b.coords[e.first];
    const auto& c = b.coords[e.second];
    const double dx = c[0] - a[0], dy = c[1] - a[1], dz = c[2] - a[2];
    const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
    if (d < 1e-9) throw Error("coincident atoms on masked edge");
    out.masked_edges.push_back(e);
    out.dist_targets.push_back(d);
    std::array<double, 3> eps{rng.normal(0.0, noise_sigma), rng.normal(0.0, noise_sigma),
                              rng.normal(0.0, noise_sigma)};
    out.noised_dirs.push_back({dx / d + eps[0], dy / d + eps[1], dz / d + eps[2]});
    out.dir_noise.push_back(eps);
  }
  return out;
}

}  // namespace atompatch
