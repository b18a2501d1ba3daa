// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/nn/optim.hpp"

#include <cmath>

namespace sbr::nn {

template <typename T>
Sgd<T>::Sgd(NamedTensors<T> params, SgdOptions options)
    : params_(std::move(params)), options_(options) {
  velocity_.reserve(params_.size());
  for (const auto& [name, p] : params_)
    velocity_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

template <typename T>
double Sgd<T>::step(double lr) {
  double sq = 0.0;
  for (auto& [name, p] : params_)
    if (p.has_grad())
      for (T g : p.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  double clip = 1.0;
  if (options_.max_grad_norm > 0.0 && norm > options_.max_grad_norm)
    clip = options_.max_grad_norm / (norm + 1e-12);

  const T mom = static_cast<T>(options_.momentum);
  const T wd = static_cast<T>(options_.weight_decay);
  const T rate = static_cast<T>(lr);
  const T c = static_cast<T>(clip);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].second;
    auto values = p.values();
    auto& v = velocity_[k];
    const bool has = p.has_grad();
    const std::span<const T> grad = has ? p.grad() : std::span<const T>{};
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = (has ? grad[i] * c : T(0)) + wd * values[i];
      v[i] = mom * v[i] + g;
      values[i] -= rate * v[i];
    }
  }
  return norm;
}

template class Sgd<float>;
template class Sgd<double>;

}  // namespace sbr::nn
