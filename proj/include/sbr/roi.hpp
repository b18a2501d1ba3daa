// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sbr/geometry.hpp"
#include "sbr/nets.hpp"
#include "sbr/nn/layers.hpp"
#include "sbr/nonlocal.hpp"

namespace sbr {

/// Boxes to pool, each tagged with the batch image it belongs to.
struct RoiRequest {
  std::vector<Box> boxes;
  std::vector<int> batch_index;

  std::size_t size() const { return boxes.size(); }
};

struct RoiAlignParams {
  int output_size = 7;
  /// Sample points per bin along each axis.
  int sampling_ratio = 2;
  /// Half-pixel offset so that feature cell i is centered at i + 0.5 in
  /// scaled box coordinates.
  bool aligned = true;
};

/// Bilinear RoIAlign of `features` [N, C, H, W] at `stride`; returns
/// [n, C, S, S]. Zero-area boxes produce zero features.
template <typename T>
nn::Tensor<T> roi_align(const nn::Tensor<T>& features, const RoiRequest& rois, int stride,
                        const RoiAlignParams& params);

/// Single-level assignment: k = floor(k0 + log2(sqrt(wh) / canonical)),
/// clipped to the pyramid.
struct LevelRule {
  int k0 = 4;
  double canonical_size = 64.0;
};

/// Index into the pyramid's levels (level P_k sits at index k - 2, strides
/// starting at 4).
int baseline_level(const Box& box, const LevelRule& rule, int num_levels);

template <typename T>
nn::Tensor<T> baseline_extract(const FeaturePyramid<T>& pyramid, const RoiRequest& rois,
                               const RoiAlignParams& params, const LevelRule& rule = {});

enum class RoiModuleKind { kNone, kConv3, kConv5, kConv7, kConvRect, kNonLocal1, kNonLocal7 };

const char* roi_module_name(RoiModuleKind kind);
/// Accepts "none", "conv3", "conv5", "conv7", "conv7x3_3x7", "nonlocal1", "nonlocal7".
RoiModuleKind parse_roi_module(const std::string& name);

/// One entry of the pre/post module menu. Convolutions keep C channels and
/// spatial size and are followed by ReLU.
template <typename T>
class RoiModule : public nn::Module<T> {
 public:
  RoiModule() = default;
  RoiModule(RoiModuleKind kind, int channels, nn::Rng& rng);

  nn::Tensor<T> operator()(const nn::Tensor<T>& x) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;
  RoiModuleKind kind() const { return kind_; }

 private:
  RoiModuleKind kind_ = RoiModuleKind::kNone;
  std::vector<nn::Conv2d<T>> convs_;
  std::shared_ptr<NonLocalBlock<T>> nonlocal_;
};

struct GroieConfig {
  RoiModuleKind pre = RoiModuleKind::kConv7;
  RoiModuleKind post = RoiModuleKind::kNonLocal7;
  /// One pre-module per level instead of a single shared one.
  bool per_level_weights = false;

  static GroieConfig best() { return {}; }
};

/// Pool from every level, pre-process each, sum, post-process.
template <typename T>
class GroieExtractor : public nn::Module<T> {
 public:
  GroieExtractor() = default;
  GroieExtractor(const GroieConfig& cfg, int channels, int num_levels, nn::Rng& rng);

  nn::Tensor<T> operator()(const FeaturePyramid<T>& pyramid, const RoiRequest& rois,
                           const RoiAlignParams& params) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;
  const GroieConfig& config() const { return cfg_; }

 private:
  GroieConfig cfg_;
  int channels_ = 0;
  std::vector<RoiModule<T>> pre_;  // one, or one per level
  RoiModule<T> post_;
};

}  // namespace sbr
