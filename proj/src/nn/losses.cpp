// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/nn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sbr::nn {

namespace {
template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}
}  // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be [n, C]");
  const auto n = logits.dim(0), c = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy: one label per row required");
  if (n == 0) throw std::invalid_argument("cross_entropy: empty batch");
  Buffer<T> prob(static_cast<std::size_t>(n * c));
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c)
      throw std::invalid_argument("cross_entropy: label out of range");
    const T* z = logits.data() + i * c;
    const T mx = *std::max_element(z, z + c);
    T s = 0;
    for (std::int64_t k = 0; k < c; ++k) s += (prob[i * c + k] = std::exp(z[k] - mx));
    for (std::int64_t k = 0; k < c; ++k) prob[i * c + k] /= s;
    loss += std::log(s) + mx - z[labels[i]];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return Tensor<T>::make_result(
      Shape{}, {loss / static_cast<T>(n)}, {&logits}, "cross_entropy",
      [n, c, prob = std::move(prob), lab = std::move(lab)](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        T* g = p.grad_buffer().data();
        const T s = self.grad[0] / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t k = 0; k < c; ++k)
            g[i * c + k] += s * (prob[i * c + k] - (k == lab[i] ? T(1) : T(0)));
      });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target) {
  require_same(logits, target, "bce_with_logits");
  const auto n = logits.numel();
  if (n == 0) throw std::invalid_argument("bce_with_logits: empty input");
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T z = logits.data()[i], t = target.data()[i];
    loss += std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  Buffer<T> tv(target.values().begin(), target.values().end());
  return Tensor<T>::make_result(Shape{}, {loss / static_cast<T>(n)}, {&logits},
                                "bce_with_logits",
                                [n, tv = std::move(tv)](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  T* g = p.grad_buffer().data();
                                  const T s = self.grad[0] / static_cast<T>(n);
                                  for (std::int64_t i = 0; i < n; ++i) {
                                    const T sig = T(1) / (T(1) + std::exp(-p.value[i]));
                                    g[i] += s * (sig - tv[i]);
                                  }
                                });
}

template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, T beta) {
  require_same(pred, target, "smooth_l1");
  const auto n = pred.numel();
  T loss = 0;
  Buffer<T> d(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    d[i] = pred.data()[i] - target.data()[i];
    const T a = std::abs(d[i]);
    loss += a < beta ? T(0.5) * a * a / beta : a - T(0.5) * beta;
  }
  return Tensor<T>::make_result(Shape{}, {loss}, {&pred}, "smooth_l1",
                                [n, beta, d = std::move(d)](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  T* g = p.grad_buffer().data();
                                  const T s = self.grad[0];
                                  for (std::int64_t i = 0; i < n; ++i) {
                                    const T a = std::abs(d[i]);
                                    g[i] += s * (a < beta ? d[i] / beta
                                                          : (d[i] > 0 ? T(1) : T(-1)));
                                  }
                                });
}

template <typename T>
Tensor<T> squared_error(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same(pred, target, "squared_error");
  const auto n = pred.numel();
  T loss = 0;
  Buffer<T> d(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    d[i] = pred.data()[i] - target.data()[i];
    loss += d[i] * d[i];
  }
  return Tensor<T>::make_result(Shape{}, {loss}, {&pred}, "squared_error",
                                [n, d = std::move(d)](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  T* g = p.grad_buffer().data();
                                  for (std::int64_t i = 0; i < n; ++i)
                                    g[i] += self.grad[0] * T(2) * d[i];
                                });
}

template Tensor<float> cross_entropy(const Tensor<float>&, std::span<const int>);
template Tensor<double> cross_entropy(const Tensor<double>&, std::span<const int>);
template Tensor<float> bce_with_logits(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> bce_with_logits(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> smooth_l1(const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> smooth_l1(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> squared_error(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> squared_error(const Tensor<double>&, const Tensor<double>&);

}  // namespace sbr::nn
