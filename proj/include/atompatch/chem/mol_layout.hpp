#pragma once

// Deterministic 3D embedding for bond graphs. BFS placement seeds positions,
// an iterative distance-geometry pass relaxes them, and the result is only
// accepted when every bonded pair lands in [1.0, 1.8] Angstrom and every
// non-bonded pair is at least 1.8 apart. A few reseeded attempts are made
// before giving up.

#include <array>
#include <cmath>
#include <cstdint>
#include <queue>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/rng.hpp"

namespace atompatch {

namespace detail_layout {

inline double clampd(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

/// Bond-length target from covalent radii, kept inside the accepted window.
inline double bond_target(int za, int zb) {
  return clampd(covalent_radius(za) + covalent_radius(zb), 1.1, 1.75);
}

using Vec3 = std::array<double, 3>;

inline Vec3 sub3(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

inline double norm3(const Vec3& v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

}  // namespace detail_layout

/// Fills g.coords for a connected molecule graph. Deterministic per seed.
inline void embed_molecule(AtomGraph& g, std::uint64_t seed) {
  using namespace detail_layout;
  const std::size_t n = g.size();
  if (n == 0) throw Error("embed_molecule: empty graph");

  // adjacency + connectivity
  std::vector<std::vector<std::size_t>> adj(n);
  for (const auto& e : g.edges) {
    adj[e.first].push_back(e.second);
    adj[e.second].push_back(e.first);
  }
  {
    std::vector<char> seen(n, 0);
    std::queue<std::size_t> q;
    q.push(0);
    seen[0] = 1;
    std::size_t reached = 1;
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop();
      for (auto v : adj[u]) {
        if (!seen[v]) {
          seen[v] = 1;
          ++reached;
          q.push(v);
        }
      }
    }
    if (reached != n) throw Error("disconnected molecule");
  }

  if (n == 1) {
    g.coords = {{0.0, 0.0, 0.0}};
    return;
  }

  const double kMinSep = 1.8;   // non-bonded floor
  const double kPushTo = 1.9;   // repair target for close non-bonded pairs

  for (int attempt = 0; attempt < 8; ++attempt) {
    Rng rng(seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(attempt));
    std::vector<Vec3> pos(n, {0.0, 0.0, 0.0});

    // BFS placement along random directions at bond-length distance
    {
      std::vector<char> placed(n, 0);
      std::queue<std::size_t> q;
      placed[0] = 1;
      q.push(0);
      while (!q.empty()) {
        const std::size_t u = q.front();
        q.pop();
        for (auto v : adj[u]) {
          if (placed[v]) continue;
          Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
          double nn = norm3(dir);
          if (nn < 1e-9) dir = {1.0, 0.0, 0.0}, nn = 1.0;
          const double t = bond_target(g.atoms[u].element, g.atoms[v].element);
          for (int k = 0; k < 3; ++k) pos[v][k] = pos[u][k] + dir[k] / nn * t;
          placed[v] = 1;
          q.push(v);
        }
      }
    }

    // iterative pairwise correction (bonded pulls to target, close
    // non-bonded pushes out), with a decaying step
    for (int iter = 0; iter < 600; ++iter) {
      const double step = 0.8 * (1.0 - 0.7 * static_cast<double>(iter) / 600.0);
      for (const auto& e : g.edges) {
        const std::size_t a = e.first, b = e.second;
        Vec3 d = sub3(pos[b], pos[a]);
        double dist = norm3(d);
        if (dist < 1e-9) {
          d = {rng.normal() * 0.01, rng.normal() * 0.01, rng.normal() * 0.01};
          dist = norm3(d);
          if (dist < 1e-12) continue;
        }
        const double t = bond_target(g.atoms[a].element, g.atoms[b].element);
        const double corr = 0.5 * step * (dist - t) / dist;
        for (int k = 0; k < 3; ++k) {
          pos[a][k] += corr * d[k];
          pos[b][k] -= corr * d[k];
        }
      }
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
          bool bonded = false;
          for (auto v : adj[a]) {
            if (v == b) {
              bonded = true;
              break;
            }
          }
          if (bonded) continue;
          Vec3 d = sub3(pos[b], pos[a]);
          double dist = norm3(d);
          if (dist >= kPushTo) continue;
          if (dist < 1e-9) {
            d = {rng.normal() * 0.01, rng.normal() * 0.01, rng.normal() * 0.01};
            dist = norm3(d);
            if (dist < 1e-12) continue;
          }
          const double corr = 0.5 * step * (dist - kPushTo) / dist;
          for (int k = 0; k < 3; ++k) {
            pos[a][k] += corr * d[k];
            pos[b][k] -= corr * d[k];
          }
        }
      }
    }

    // acceptance check
    bool ok = true;
    for (const auto& e : g.edges) {
      const double d = norm3(sub3(pos[e.first], pos[e.second]));
      if (d < 1.0 || d > 1.8) {
        ok = false;
        break;
      }
    }
    if (ok) {
      for (std::size_t a = 0; a < n && ok; ++a) {
        for (std::size_t b = a + 1; b < n && ok; ++b) {
          bool bonded = false;
          for (auto v : adj[a]) {
            if (v == b) {
              bonded = true;
              break;
            }
          }
          if (!bonded && norm3(sub3(pos[a], pos[b])) < kMinSep) ok = false;
        }
      }
    }
    if (ok) {
      g.coords.assign(pos.begin(), pos.end());
      center_coords(g);
      return;
    }
  }
  throw Error("layout failed");
}

}  // namespace atompatch
