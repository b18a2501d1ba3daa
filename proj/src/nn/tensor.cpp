// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/nn/tensor.hpp"

#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace sbr::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<NodeT>()) {
  const auto n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->value.assign(static_cast<std::size_t>(n), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, Buffer<T> values) : node_(std::make_shared<NodeT>()) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_string(shape));
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

template <typename T>
std::int64_t Tensor<T>::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r)
    throw std::out_of_range("Tensor::dim: axis out of range for " + shape_string(shape()));
  return node_->shape[static_cast<std::size_t>(i)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1)
    throw std::logic_error("Tensor::item: tensor has shape " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  if (index.size() != node_->shape.size())
    throw std::invalid_argument("Tensor::at: index rank mismatch");
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    const auto d = node_->shape[k++];
    if (i < 0 || i >= d) throw std::out_of_range("Tensor::at: index out of range");
    flat = flat * d + i;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return node_->grad_buffer();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<NodeT>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return detach();
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, Buffer<T> values,
                                 std::initializer_list<const Tensor*> inputs, const char* op,
                                 BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  out.node_->op = op;
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const Tensor* in : inputs) any = any || (in && in->requires_grad());
  if (!any) return out;
  out.node_->requires_grad = true;
  for (const Tensor* in : inputs) out.node_->parents.push_back(in->node_);
  out.node_->backward = std::move(backward);
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, Buffer<T> values,
                                 const std::vector<Tensor>& inputs, const char* op,
                                 BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  out.node_->op = op;
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const Tensor& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  for (const Tensor& in : inputs) out.node_->parents.push_back(in.node_);
  out.node_->backward = std::move(backward);
  return out;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1)
    throw std::logic_error("Tensor::backward: root must hold a single element, got " +
                           shape_string(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeT* p = n->parents[next++].get();
      if (p && p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Intermediate grads are not needed after the sweep.
  for (NodeT* n : order)
    if (n->backward) n->grad.clear();
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace sbr::nn
