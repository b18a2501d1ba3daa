// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/nonlocal.hpp"

#include <stdexcept>

#include "sbr/nn/ops.hpp"

namespace sbr {

using nn::Tensor;

template <typename T>
NonLocalBlock<T>::NonLocalBlock(int channels, const NonLocalConfig& cfg, nn::Rng& rng)
    : channels_(channels) {
  if (cfg.reduction < 1 || channels % cfg.reduction != 0 || cfg.kernel % 2 == 0)
    throw std::invalid_argument("NonLocalBlock: invalid configuration");
  inter_ = channels / cfg.reduction;
  const int kv = cfg.large_kernel_theta_phi_only ? 1 : cfg.kernel;
  const auto init = nn::Init::normal(0.01);
  theta = nn::Conv2d<T>::same(channels, inter_, cfg.kernel, init, rng);
  phi = nn::Conv2d<T>::same(channels, inter_, cfg.kernel, init, rng);
  g = nn::Conv2d<T>::same(channels, inter_, kv, init, rng);
  out = nn::Conv2d<T>::same(inter_, channels, kv, nn::Init::zeros(), rng);
}

template <typename T>
Tensor<T> NonLocalBlock<T>::attention(const Tensor<T>& x) const {
  const auto n = x.dim(0), hw = x.dim(2) * x.dim(3);
  const Tensor<T> th = nn::reshape(theta(x), {n, inter_, hw});
  const Tensor<T> ph = nn::reshape(phi(x), {n, inter_, hw});
  return nn::softmax(nn::bmm(th, ph, /*transpose_a=*/true));
}

template <typename T>
Tensor<T> NonLocalBlock<T>::operator()(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != channels_)
    throw std::invalid_argument("NonLocalBlock: expected [N, " + std::to_string(channels_) +
                                ", H, W], got " + nn::shape_string(x.shape()));
  const auto n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const Tensor<T> gv = nn::reshape(g(x), {n, inter_, h * w});
  // [N, C', HW] = g [N, C', HW] x attn^T
  const Tensor<T> y = nn::bmm(gv, attention(x), false, /*transpose_b=*/true);
  return nn::add(x, out(nn::reshape(y, {n, inter_, h, w})));
}

template <typename T>
void NonLocalBlock<T>::collect_parameters(const std::string& prefix,
                                          nn::NamedTensors<T>& out_params) const {
  theta.collect_parameters(nn::join_name(prefix, "theta"), out_params);
  phi.collect_parameters(nn::join_name(prefix, "phi"), out_params);
  g.collect_parameters(nn::join_name(prefix, "g"), out_params);
  out.collect_parameters(nn::join_name(prefix, "out"), out_params);
}

template class NonLocalBlock<float>;
template class NonLocalBlock<double>;

}  // namespace sbr
