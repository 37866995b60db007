#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "styemp/error.hpp"

namespace styemp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool recorded = false;  // produced by an op on some tape

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share storage; ops never mutate
/// their inputs, so a tensor referenced by a tape stays valid for replay.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  static Tensor vector(std::vector<T> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows,
                       bool requires_grad = false) {
    std::vector<T> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(data), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = T(1);
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const {
    if (axis >= rank())
      throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
    return impl_->shape[axis];
  }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Writes go straight to storage; only valid on tensors no tape depends on
  // (parameters between steps, freshly built constants).
  std::span<T> mutable_data() { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape.back() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), T(0)); }

  /// Deep copy without gradient history.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(impl_->shape, std::move(out), impl_->requires_grad);
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Ordered record of differentiable operations. Each entry owns the output
/// node and a closure that pushes the output gradient into the inputs.
template <typename T>
class Tape {
 public:
  using Adjoint = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const std::shared_ptr<TensorImpl<T>>& out, Adjoint adjoint) {
    out->recorded = true;
    entries_.push_back({out, std::move(adjoint)});
  }

  std::size_t size() const noexcept { return entries_.size(); }

  /// Reverse sweep from a scalar loss. Gradients of leaves accumulate across
  /// calls; intermediate gradients are reset at the start of every sweep.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ShapeError("backward requires a scalar loss, got " +
                       (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
    const auto& root = loss.impl();
    bool found = false;
    for (auto& e : entries_) {
      e.out->grad.assign(e.out->data.size(), T(0));
      if (e.out == root) found = true;
    }
    if (!found) throw ContractError("backward: loss was not produced on this tape");
    root->grad[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      bool nonzero = false;
      for (T g : it->out->grad)
        if (g != T(0)) {
          nonzero = true;
          break;
        }
      if (nonzero) it->adjoint();
    }
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<TensorImpl<T>> out;
    Adjoint adjoint;
  };
  std::vector<Entry> entries_;
};

template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Routes every differentiable op issued on this thread onto `tape` for the
/// lifetime of the scope. Without an active tape ops run in inference mode.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (e.g. decoding inside a training step).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) throw ContractError("backward called without an active tape");
  tape->backward(loss);
}

}  // namespace styemp
