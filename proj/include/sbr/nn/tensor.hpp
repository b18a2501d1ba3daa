// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace sbr::nn {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Whether newly created op results record a backward graph (thread-local).
bool grad_enabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Storage aligned to 64 bytes. Vectorized reductions peel by alignment, so
/// aligned buffers make every result a function of the shape alone.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  Buffer<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies alias the same storage and the same
/// gradient. Op results hold their inputs alive until the result is dropped.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using NodeT = detail::Node<T>;
  using BackwardFn = std::function<void(NodeT&)>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, Buffer<T> values);
  Tensor(Shape shape, const std::vector<T>& values)
      : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end())) {}

  static Tensor scalar(T v) { return Tensor(Shape{}, Buffer<T>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  const T* data() const { return node_->value.data(); }
  T* data() { return node_->value.data(); }
  std::span<const T> values() const { return node_->value; }
  std::span<T> values() { return node_->value; }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Gradient view; all zeros when nothing has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no history.
  Tensor detach() const;
  /// Deep copy of the values, no history.
  Tensor clone() const;

  /// Backpropagates from a single-element tensor with seed gradient 1.
  void backward() const;

  /// Builds an op result. When recording is enabled and any input requires
  /// grad, the result keeps its inputs and the backward closure.
  static Tensor make_result(Shape shape, Buffer<T> values,
                            std::initializer_list<const Tensor*> inputs, const char* op,
                            BackwardFn backward);
  static Tensor make_result(Shape shape, Buffer<T> values,
                            const std::vector<Tensor>& inputs, const char* op,
                            BackwardFn backward);

  NodeT* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}
  std::shared_ptr<NodeT> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Grad buffer of an op input, or nullptr when the input does not need one.
template <typename T>
inline T* grad_target(detail::Node<T>& parent) {
  return parent.requires_grad ? parent.grad_buffer().data() : nullptr;
}

}  // namespace sbr::nn
