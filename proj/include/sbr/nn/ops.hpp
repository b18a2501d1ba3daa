// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "sbr/nn/tensor.hpp"

// Differentiable free functions over Tensor<T>. Every op is instantiated for
// float (training) and double (finite-difference checks). Image-like tensors
// are NCHW.
namespace sbr::nn {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);

/// Sum of a list of same-shaped tensors.
template <typename T> Tensor<T> add_n(const std::vector<Tensor<T>>& terms);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

/// Rows of `a` (axis 0) in the given order; repeats allowed.
template <typename T> Tensor<T> index_select(const Tensor<T>& a, std::span<const int> rows);

/// For a of shape [n, K, ...], picks channel channels[i] of row i: [n, ...].
template <typename T>
Tensor<T> select_channel(const Tensor<T>& a, std::span<const int> channels);

/// Batched matmul over [B, M, K] x [B, K, N]; the flags transpose the last
/// two axes of the corresponding operand first.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false,
              bool transpose_b = false);

/// Softmax over the last axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& a);

/// x [N, I], weight [O, I], bias [O] (may be undefined) -> [N, O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

struct Conv2dSpec {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
};

/// x [N, C, H, W], weight [O, C, kh, kw], bias [O] (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dSpec spec = {});

/// Stride-2, kernel-2 transposed convolution: x [N, C, H, W],
/// weight [C, O, 2, 2] -> [N, O, 2H, 2W].
template <typename T>
Tensor<T> conv_transpose2x2(const Tensor<T>& x, const Tensor<T>& weight,
                            const Tensor<T>& bias);

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     int groups, T eps = T(1e-5));

template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& x, int factor);

/// 2x2 max pooling with stride 2 (floor on odd sizes).
template <typename T> Tensor<T> max_pool2x2(const Tensor<T>& x);

/// Zero padding on the bottom and right edges of an NCHW tensor.
template <typename T> Tensor<T> pad_bottom_right(const Tensor<T>& x, int pad_h, int pad_w);

}  // namespace sbr::nn
