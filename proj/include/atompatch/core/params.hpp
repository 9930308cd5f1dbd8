#pragma once

// Named parameter registry plus the two building-block modules (Linear, Mlp)
// and learned layer-norm parameters. Registration order is deterministic and
// names are stable, which checkpointing and the freeze contracts rely on.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/nn_ops.hpp"
#include "atompatch/core/ops.hpp"
#include "atompatch/core/rng.hpp"

namespace atompatch {

/// Flat name -> array view of a model. Handles alias the model's nodes, so
/// optimizer updates through the registry mutate the model in place.
struct ParamRegistry {
  std::vector<std::pair<std::string, DiffArray>> items;

  void add(const std::string& name, const DiffArray& p) {
    for (const auto& it : items) {
      if (it.first == name) throw Error("duplicate parameter name: " + name);
    }
    items.emplace_back(name, p);
  }

  const DiffArray* find(const std::string& name) const {
    for (const auto& it : items) {
      if (it.first == name) return &it.second;
    }
    return nullptr;
  }

  /// Subset whose names start with any of the given prefixes.
  ParamRegistry with_prefixes(const std::vector<std::string>& prefixes) const {
    ParamRegistry out;
    for (const auto& it : items) {
      for (const auto& p : prefixes) {
        if (it.first.rfind(p, 0) == 0) {
          out.items.push_back(it);
          break;
        }
      }
    }
    return out;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& it : items) n += it.second.size();
    return n;
  }

  void zero_grad() {
    for (auto& it : items) it.second.zero_grad();
  }

  /// Deep copy of current values, keyed by name.
  std::vector<std::pair<std::string, std::vector<double>>> snapshot() const {
    std::vector<std::pair<std::string, std::vector<double>>> out;
    out.reserve(items.size());
    for (const auto& it : items) out.emplace_back(it.first, it.second.data());
    return out;
  }
};

/// y = x W + b with W of shape (in, out).
struct Linear {
  DiffArray w;
  DiffArray b;

  Linear() = default;

  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    w = DiffArray(Shape{in, out}, rng.uniform_vec(in * out, -bound, bound), true);
    if (bias) b = DiffArray::zeros(Shape{out}, true);
  }

  DiffArray forward(const DiffArray& x) const {
    DiffArray y = matmul(x, w);
    if (b.defined()) y = add_row(y, b);
    return y;
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".w", w);
    if (b.defined()) reg.add(prefix + ".b", b);
  }

  std::size_t out_dim() const { return w.cols(); }
};

enum class Activation { kSilu, kGelu };

inline DiffArray apply_activation(const DiffArray& x, Activation act) {
  return act == Activation::kSilu ? silu(x) : gelu(x);
}

/// Plain feed-forward stack: Linear -> act -> [dropout] -> ... -> Linear.
/// Dropout applies to hidden activations only and only when an Rng is passed.
struct Mlp {
  std::vector<Linear> layers;
  Activation act = Activation::kSilu;
  double dropout_p = 0.0;

  Mlp() = default;

  Mlp(const std::vector<std::size_t>& dims, Rng& rng, Activation a = Activation::kSilu,
      double dropout = 0.0)
      : act(a), dropout_p(dropout) {
    if (dims.size() < 2) throw Error("Mlp needs at least input and output dims");
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      layers.emplace_back(dims[i], dims[i + 1], rng);
    }
  }

  DiffArray forward(const DiffArray& x, Rng* train_rng = nullptr) const {
    DiffArray h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(h);
      if (i + 1 < layers.size()) {
        h = apply_activation(h, act);
        if (train_rng && dropout_p > 0.0) h = dropout(h, dropout_p, *train_rng);
      }
    }
    return h;
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].register_params(reg, prefix + ".l" + std::to_string(i));
    }
  }
};

/// Learned gain/bias for layer_norm.
struct LayerNormParams {
  DiffArray gain;
  DiffArray bias;
  double eps = 1e-5;

  LayerNormParams() = default;

  explicit LayerNormParams(std::size_t dim) {
    gain = DiffArray::full(Shape{dim}, 1.0, true);
    bias = DiffArray::zeros(Shape{dim}, true);
  }

  DiffArray forward(const DiffArray& x) const { return layer_norm(x, gain, bias, eps); }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".gain", gain);
    reg.add(prefix + ".bias", bias);
  }
};

}  // namespace atompatch
