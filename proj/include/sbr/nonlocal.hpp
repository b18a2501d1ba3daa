// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sbr/nn/layers.hpp"

namespace sbr {

struct NonLocalConfig {
  /// Kernel of the internal convolutions (1 or 7; any odd size works).
  int kernel = 7;
  /// inter_channels = channels / reduction.
  int reduction = 2;
  /// Apply `kernel` to theta and phi only; g and the output projection stay 1x1.
  bool large_kernel_theta_phi_only = false;
};

/// Embedded-Gaussian self-attention over spatial positions with a residual
/// connection: y = x + W_out(softmax(theta(x)^T phi(x)) g(x)).
/// W_out starts at zero, so a fresh block is the identity.
template <typename T>
class NonLocalBlock : public nn::Module<T> {
 public:
  NonLocalBlock() = default;
  NonLocalBlock(int channels, const NonLocalConfig& cfg, nn::Rng& rng);

  nn::Tensor<T> operator()(const nn::Tensor<T>& x) const;
  /// Row-stochastic [N, HW, HW] attention map, for inspection.
  nn::Tensor<T> attention(const nn::Tensor<T>& x) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;

  nn::Conv2d<T> theta, phi, g, out;

 private:
  int channels_ = 0;
  int inter_ = 0;
};

extern template class NonLocalBlock<float>;
extern template class NonLocalBlock<double>;

}  // namespace sbr
