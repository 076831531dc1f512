// Copyright (c) 2026 RocNet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rocnet/common.hpp"

namespace rocnet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // same length as values when gradient tracking is on
  bool requires_grad = false;
  bool leaf = true;  // false for op outputs; their grads reset on each backward

  explicit TensorStorage(Shape s, T fill) : shape(std::move(s)) {
    for (auto e : shape)
      if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    values.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    MemoryTracker::add(values.size() * sizeof(T));
  }
  TensorStorage(Shape s, std::vector<T> vals) : shape(std::move(s)), values(std::move(vals)) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      throw DimensionError("value count does not match shape " + shape_str(shape));
    MemoryTracker::add(values.size() * sizeof(T));
  }
  ~TensorStorage() { MemoryTracker::sub((values.size() + grad.size()) * sizeof(T)); }

  TensorStorage(const TensorStorage&) = delete;
  TensorStorage& operator=(const TensorStorage&) = delete;

  void ensure_grad() {
    if (grad.empty()) {
      grad.assign(values.size(), T{0});
      MemoryTracker::add(grad.size() * sizeof(T));
    }
  }
};

}  // namespace detail

// Dense multi-dimensional array with optional gradient buffer. Copies are
// shallow (shared storage); values are treated as immutable once an op has
// consumed them, except for gradient accumulation and parameter updates.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : d_(std::make_shared<detail::TensorStorage<T>>(std::move(shape), fill)) {}

  static Tensor from(Shape shape, std::vector<T> values) {
    Tensor t;
    t.d_ = std::make_shared<detail::TensorStorage<T>>(std::move(shape), std::move(values));
    return t;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }

  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor randn(Shape shape, std::mt19937& rng, T stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& v : t.d_->values) v = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(d_->values.size()); }
  std::int64_t rank() const { return static_cast<std::int64_t>(d_->shape.size()); }
  std::int64_t extent(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }

  std::span<T> values() { return d_->values; }
  std::span<const T> values() const { return d_->values; }
  T* data() { return d_->values.data(); }
  const T* data() const { return d_->values.data(); }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    d_->requires_grad = v;
    if (v) d_->ensure_grad();
    return *this;
  }
  bool is_leaf() const { return d_->leaf; }

  std::span<T> grad() {
    d_->ensure_grad();
    return d_->grad;
  }
  std::span<const T> grad() const { return d_->grad; }
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T{0});
  }

  T item() const {
    if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return d_->values[0];
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  // internal: used by ops when constructing graph outputs
  void mark_output() {
    d_->leaf = false;
    d_->requires_grad = true;
    d_->ensure_grad();
  }
  std::shared_ptr<detail::TensorStorage<T>> storage() const { return d_; }

 private:
  std::shared_ptr<detail::TensorStorage<T>> d_;
};

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + " produced a non-finite value");
}

// Records backward rules in forward order; backward replays them once, in
// reverse. Gradient accumulation is additive; op-output gradients are reset
// at the start of every backward pass so repeated calls accumulate only into
// leaves.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }

  void register_output(const Tensor<T>& t) { outputs_.push_back(t.storage()); }

  std::size_t size() const { return rules_.size(); }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw UsageError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad() || loss.is_leaf())
      throw UsageError("backward requires a loss produced by recorded operations");
    for (auto& out : outputs_)
      if (!out->grad.empty()) std::fill(out->grad.begin(), out->grad.end(), T{0});
    loss.storage()->grad[0] = T{1};
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> rules_;
  std::vector<std::shared_ptr<detail::TensorStorage<T>>> outputs_;
};

namespace detail {

// Shared op plumbing: decide whether the result joins the graph, and set it
// up as a tape output if so.
template <typename T>
inline bool attach_output(Tape<T>* tape, Tensor<T>& out, bool any_input_grad) {
  if (tape == nullptr || !any_input_grad) return false;
  out.mark_output();
  tape->register_output(out);
  return true;
}

}  // namespace detail

}  // namespace rocnet
