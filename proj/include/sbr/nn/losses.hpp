// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>

#include "sbr/nn/tensor.hpp"

namespace sbr::nn {

/// Mean multi-class cross entropy of logits [n, C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Mean binary cross entropy on logits; `target` is treated as a constant.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target);

/// Summed smooth-L1 (Huber with transition `beta`) against a constant target.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, T beta = T(1));

/// Summed squared error against a constant target.
template <typename T>
Tensor<T> squared_error(const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace sbr::nn
