// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sbr/nn/ops.hpp"
#include "sbr/nn/tensor.hpp"

namespace sbr::nn {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

using Rng = std::mt19937_64;

std::string join_name(const std::string& prefix, const std::string& name);

/// Anything owning learnable tensors. Names are dotted paths, stable across
/// runs, and used as checkpoint keys.
template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_parameters(const std::string& prefix, NamedTensors<T>& out) const = 0;

  NamedTensors<T> named_parameters(const std::string& prefix = "") const {
    NamedTensors<T> out;
    collect_parameters(prefix, out);
    return out;
  }
  std::int64_t num_parameters() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }
};

struct Init {
  enum class Kind { kZeros, kNormal, kKaimingFanOut, kKaimingFanIn };
  Kind kind = Kind::kKaimingFanOut;
  double std = 0.01;

  static Init zeros() { return {Kind::kZeros, 0.0}; }
  static Init normal(double s) { return {Kind::kNormal, s}; }
  static Init kaiming_fan_out() { return {Kind::kKaimingFanOut, 0.0}; }
  static Init kaiming_fan_in() { return {Kind::kKaimingFanIn, 0.0}; }
};

/// While alive on this thread, parameters are created zero-filled without
/// drawing from the generator. For code that only needs shapes.
class ShapeOnlyScope {
 public:
  ShapeOnlyScope();
  ~ShapeOnlyScope();
  ShapeOnlyScope(const ShapeOnlyScope&) = delete;
  ShapeOnlyScope& operator=(const ShapeOnlyScope&) = delete;

 private:
  bool previous_;
};

template <typename T>
Tensor<T> make_parameter(Shape shape, Init init, std::int64_t fan_in, std::int64_t fan_out,
                         Rng& rng);

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w, Conv2dSpec spec,
         Init init, Rng& rng, bool bias = true);
  /// Square kernel with "same" padding for odd sizes.
  static Conv2d same(int in_channels, int out_channels, int kernel, Init init, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, spec); }
  void collect_parameters(const std::string& prefix, NamedTensors<T>& out) const override;

  Tensor<T> weight;  // [O, C, kh, kw]
  Tensor<T> bias;    // [O] or undefined
  Conv2dSpec spec;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, Init init, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect_parameters(const std::string& prefix, NamedTensors<T>& out) const override;

  Tensor<T> weight;  // [O, I]
  Tensor<T> bias;    // [O]
};

template <typename T>
class GroupNorm : public Module<T> {
 public:
  GroupNorm() = default;
  GroupNorm(int channels, int groups, bool zero_gamma = false);

  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, gamma, beta, groups); }
  void collect_parameters(const std::string& prefix, NamedTensors<T>& out) const override;

  Tensor<T> gamma;
  Tensor<T> beta;
  int groups = 1;
};

/// Kernel-2 stride-2 learned upsampling.
template <typename T>
class ConvTranspose2x2 : public Module<T> {
 public:
  ConvTranspose2x2() = default;
  ConvTranspose2x2(int in_channels, int out_channels, Init init, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv_transpose2x2(x, weight, bias);
  }
  void collect_parameters(const std::string& prefix, NamedTensors<T>& out) const override;

  Tensor<T> weight;  // [C, O, 2, 2]
  Tensor<T> bias;    // [O]
};

/// Largest divisor of `channels` not exceeding `preferred`.
int group_count(int channels, int preferred = 8);

}  // namespace sbr::nn
