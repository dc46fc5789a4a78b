#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "upmad/errors.hpp"

namespace upmad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const Shape& s);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool leaf = true;
};

/// Dense row-major tensor handle (last axis fastest). Copies share storage;
/// ops never mutate their inputs, so a tensor produced by an op is a value.
/// Leaves (parameters, inputs) may be updated in place by an optimizer.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<TensorStorage<T>>()) {
    if (shape.empty() || shape.size() > 5) throw ShapeError("tensor rank must be 1..5, got " + std::to_string(shape.size()));
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : s_(std::make_shared<TensorStorage<T>>()) {
    if (shape.empty() || shape.size() > 5) throw ShapeError("tensor rank must be 1..5, got " + std::to_string(shape.size()));
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<const T> data() const { return s_->data; }
  std::span<T> mutable_data() { return s_->data; }
  T operator[](std::size_t i) const { return s_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return s_->leaf; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  /// Grad buffer, zero-allocated on first access.
  std::span<T> grad_buffer() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }
  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }
  void clear_grad() { s_->grad.clear(); }

  /// Deep copy of the values with no autodiff state.
  Tensor detach() const { return Tensor(shape(), s_->data); }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  // Used by the op recorder.
  void mark_non_leaf() {
    s_->leaf = false;
    s_->requires_grad = true;
  }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

template <typename T>
class Tape;

namespace detail {
template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

/// Ordered record of primitive applications. Recording order is a
/// topological order of the graph, so backward replays it in reverse.
/// Confined to the thread that created it.
template <typename T>
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    // Reads output.grad(), accumulates into the inputs that require grad.
    std::function<void(const Tensor<T>& out)> backward;
  };

  explicit Tape(bool single_use = false) : single_use_(single_use) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(Node node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  bool consumed() const { return consumed_; }

  void clear() {
    nodes_.clear();
    consumed_ = false;
  }

  /// Propagates d(loss)/d(leaf) into every reachable requires_grad leaf.
  /// Leaf gradients accumulate across calls; intermediate gradients are
  /// reset each call.
  void backward(Tensor<T> loss) {
    if (consumed_) throw Error("tape already consumed (single-use tape)");
    if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    std::ptrdiff_t last = -1;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].output.same_storage(loss)) last = static_cast<std::ptrdiff_t>(i);
    }
    if (last < 0) throw Error("loss was not produced on this tape");
    for (auto& n : nodes_) n.output.clear_grad();
    loss.grad_buffer()[0] = T(1);
    for (std::ptrdiff_t i = last; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.output.has_grad()) continue;  // not reachable from the loss
      n.backward(n.output);
    }
    if (single_use_) {
      nodes_.clear();
      consumed_ = true;
    }
  }

 private:
  std::vector<Node> nodes_;
  bool single_use_;
  bool consumed_ = false;
};

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

/// Makes `tape` the recording target for ops on this thread while alive.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(detail::active_tape<T>()) { detail::active_tape<T>() = &tape; }
  ~TapeScope() { detail::active_tape<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Suspends recording while alive.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape<T>()) { detail::active_tape<T>() = nullptr; }
  ~NoGradScope() { detail::active_tape<T>() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <typename T>
Tape<T>* active_tape() {
  return detail::active_tape<T>();
}

}  // namespace upmad
