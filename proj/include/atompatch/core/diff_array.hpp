#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "atompatch/core/errors.hpp"

namespace atompatch {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

namespace detail {

struct ArrayNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // lazily allocated, same length as value
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Dense f64 array (rank 0..2 in practice) with a gradient slot. Value
/// semantics on the handle, shared state underneath: copies alias the same
/// node, so an op graph can hold inputs cheaply. Gradients accumulate into
/// `grad` across backward passes until zero_grad().
class DiffArray {
 public:
  DiffArray() = default;

  DiffArray(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::ArrayNode>()) {
    if (shape_numel(shape) != data.size()) {
      throw Error("array shape " + shape_str(shape) + " does not match data length " +
                  std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static DiffArray zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return DiffArray(std::move(shape), std::move(d), requires_grad);
  }

  static DiffArray full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), v);
    return DiffArray(std::move(shape), std::move(d), requires_grad);
  }

  static DiffArray scalar(double v, bool requires_grad = false) {
    return DiffArray(Shape{}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  /// Row/col accessors for rank-2 arrays; rank-1 is treated as a column.
  std::size_t rows() const {
    if (rank() == 2) return node_->shape[0];
    if (rank() == 1) return node_->shape[0];
    return 1;
  }
  std::size_t cols() const {
    if (rank() == 2) return node_->shape[1];
    return 1;
  }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }

  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Scalar read; requires size() == 1.
  double value() const {
    if (size() != 1) throw Error("value() on non-scalar array of size " + std::to_string(size()));
    return node_->value[0];
  }

  double& at(std::size_t i) { return node_->value[i]; }
  double at(std::size_t i) const { return node_->value[i]; }
  double& at(std::size_t i, std::size_t j) { return node_->value[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }

  bool all_finite() const {
    for (double v : node_->value) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Identity of the underlying node; two handles compare equal iff they alias.
  const void* id() const { return node_.get(); }

  std::shared_ptr<detail::ArrayNode> node() const { return node_; }

 private:
  std::shared_ptr<detail::ArrayNode> node_;
};

inline void check_finite(const DiffArray& a, const std::string& context) {
  if (!a.all_finite()) throw Error("non-finite values in " + context);
}

/// Records backward closures for ops executed while it is alive. Exactly one
/// tape may be active per thread; ops consult the active tape and append one
/// closure per recorded op. backward() seeds d(root)=1 and replays closures in
/// exact reverse execution order. Leaf gradients accumulate (never overwritten),
/// which is what gradient accumulation over micro-batches relies on.
class Tape {
 public:
  Tape() {
    prev_ = active_;
    active_ = this;
  }
  ~Tape() { active_ = prev_; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return active_; }
  static bool recording() { return active_ != nullptr; }

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  std::size_t recorded_ops() const { return steps_.size(); }

  /// Backward from a scalar root. May be called once per recorded graph.
  void backward(DiffArray& root) {
    if (root.size() != 1) {
      throw Error("backward root must be scalar, got shape " + shape_str(root.shape()));
    }
    root.grad()[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
  Tape* prev_ = nullptr;
  static thread_local Tape* active_;
};

inline thread_local Tape* Tape::active_ = nullptr;

}  // namespace atompatch
