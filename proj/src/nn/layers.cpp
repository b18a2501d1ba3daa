// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace sbr::nn {

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

int group_count(int channels, int preferred) {
  for (int g = std::min(preferred, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

namespace {
thread_local bool t_shape_only = false;
}  // namespace

ShapeOnlyScope::ShapeOnlyScope() : previous_(t_shape_only) { t_shape_only = true; }
ShapeOnlyScope::~ShapeOnlyScope() { t_shape_only = previous_; }

template <typename T>
Tensor<T> make_parameter(Shape shape, Init init, std::int64_t fan_in, std::int64_t fan_out,
                         Rng& rng) {
  Tensor<T> t(std::move(shape), T(0));
  double std = 0.0;
  switch (init.kind) {
    case Init::Kind::kZeros: break;
    case Init::Kind::kNormal: std = init.std; break;
    case Init::Kind::kKaimingFanOut: std = std::sqrt(2.0 / static_cast<double>(fan_out)); break;
    case Init::Kind::kKaimingFanIn: std = std::sqrt(2.0 / static_cast<double>(fan_in)); break;
  }
  if (std > 0.0 && !t_shape_only) {
    std::normal_distribution<double> dist(0.0, std);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  }
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w,
                  Conv2dSpec spec_, Init init, Rng& rng, bool with_bias)
    : spec(spec_) {
  if (in_channels <= 0 || out_channels <= 0 || kernel_h <= 0 || kernel_w <= 0)
    throw std::invalid_argument("Conv2d: sizes must be positive");
  weight = make_parameter<T>({out_channels, in_channels, kernel_h, kernel_w}, init,
                             static_cast<std::int64_t>(in_channels) * kernel_h * kernel_w,
                             static_cast<std::int64_t>(out_channels) * kernel_h * kernel_w,
                             rng);
  if (with_bias) bias = make_parameter<T>({out_channels}, Init::zeros(), 0, 0, rng);
}

template <typename T>
Conv2d<T> Conv2d<T>::same(int in_channels, int out_channels, int kernel, Init init, Rng& rng) {
  if (kernel % 2 == 0) throw std::invalid_argument("Conv2d::same: kernel must be odd");
  return Conv2d(in_channels, out_channels, kernel, kernel,
                Conv2dSpec{1, 1, kernel / 2, kernel / 2}, init, rng);
}

template <typename T>
void Conv2d<T>::collect_parameters(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "weight"), weight);
  if (bias.defined()) out.emplace_back(join_name(prefix, "bias"), bias);
}

template <typename T>
Linear<T>::Linear(int in_features, int out_features, Init init, Rng& rng) {
  if (in_features <= 0 || out_features <= 0)
    throw std::invalid_argument("Linear: sizes must be positive");
  weight = make_parameter<T>({out_features, in_features}, init, in_features, out_features, rng);
  bias = make_parameter<T>({out_features}, Init::zeros(), 0, 0, rng);
}

template <typename T>
void Linear<T>::collect_parameters(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "weight"), weight);
  out.emplace_back(join_name(prefix, "bias"), bias);
}

template <typename T>
GroupNorm<T>::GroupNorm(int channels, int groups_, bool zero_gamma) : groups(groups_) {
  gamma = Tensor<T>({channels}, zero_gamma ? T(0) : T(1));
  beta = Tensor<T>({channels}, T(0));
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
void GroupNorm<T>::collect_parameters(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "gamma"), gamma);
  out.emplace_back(join_name(prefix, "beta"), beta);
}

template <typename T>
ConvTranspose2x2<T>::ConvTranspose2x2(int in_channels, int out_channels, Init init, Rng& rng) {
  weight = make_parameter<T>({in_channels, out_channels, 2, 2}, init,
                             static_cast<std::int64_t>(in_channels) * 4,
                             static_cast<std::int64_t>(out_channels) * 4, rng);
  bias = make_parameter<T>({out_channels}, Init::zeros(), 0, 0, rng);
}

template <typename T>
void ConvTranspose2x2<T>::collect_parameters(const std::string& prefix,
                                             NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "weight"), weight);
  out.emplace_back(join_name(prefix, "bias"), bias);
}

template Tensor<float> make_parameter<float>(Shape, Init, std::int64_t, std::int64_t, Rng&);
template Tensor<double> make_parameter<double>(Shape, Init, std::int64_t, std::int64_t, Rng&);
template class Conv2d<float>;
template class Conv2d<double>;
template class Linear<float>;
template class Linear<double>;
template class GroupNorm<float>;
template class GroupNorm<double>;
template class ConvTranspose2x2<float>;
template class ConvTranspose2x2<double>;

}  // namespace sbr::nn
