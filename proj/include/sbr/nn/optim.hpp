// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "sbr/nn/layers.hpp"

namespace sbr::nn {

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Global gradient-norm clip; <= 0 disables.
  double max_grad_norm = 0.0;
};

/// SGD with classical momentum and L2 weight decay folded into the gradient.
template <typename T>
class Sgd {
 public:
  Sgd(NamedTensors<T> params, SgdOptions options);

  void zero_grad();
  /// Returns the pre-clip global gradient norm.
  double step(double lr);

  const NamedTensors<T>& parameters() const { return params_; }

 private:
  NamedTensors<T> params_;
  SgdOptions options_;
  std::vector<std::vector<T>> velocity_;
};

extern template class Sgd<float>;
extern template class Sgd<double>;

}  // namespace sbr::nn
