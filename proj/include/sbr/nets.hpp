// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sbr/geometry.hpp"
#include "sbr/nn/layers.hpp"

namespace sbr {

template <typename T>
struct FeaturePyramid {
  std::vector<nn::Tensor<T>> levels;  // each [N, C, H_l, W_l]
  std::vector<int> strides;           // doubling, same length as levels
  int channels = 0;
};

struct BackboneConfig {
  int in_channels = 1;
  /// Width of the first stage; doubles per stage.
  int width = 32;
  /// Stages after the stride-2 stem; stage s has output stride 2^(s+1).
  int num_stages = 4;
  /// Zero-init the gamma of each stage's last normalization.
  bool zero_init_last_norm = false;
};

/// Plain conv net: a stride-2 stem, then per stage a stride-2 conv and a
/// stride-1 conv, each followed by GroupNorm and ReLU.
template <typename T>
class Backbone : public nn::Module<T> {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, nn::Rng& rng);

  /// image [N, C_in, H, W] with H, W divisible by the largest stride.
  std::vector<nn::Tensor<T>> operator()(const nn::Tensor<T>& image) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;

  std::vector<int> out_channels() const;
  std::vector<int> strides() const;

 private:
  struct Block {
    nn::Conv2d<T> conv;
    nn::GroupNorm<T> norm;
  };
  nn::Tensor<T> run(const Block& b, const nn::Tensor<T>& x) const;

  BackboneConfig cfg_;
  Block stem_;
  std::vector<std::pair<Block, Block>> stages_;
};

/// Lateral 1x1 convs, nearest top-down upsampling with addition, and a 3x3
/// output conv per level.
template <typename T>
class Fpn : public nn::Module<T> {
 public:
  Fpn() = default;
  Fpn(const std::vector<int>& in_channels, const std::vector<int>& strides, int channels,
      nn::Rng& rng);

  FeaturePyramid<T> operator()(const std::vector<nn::Tensor<T>>& features) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;
  int channels() const { return channels_; }

 private:
  int channels_ = 0;
  std::vector<int> strides_;
  std::vector<nn::Conv2d<T>> lateral_;
  std::vector<nn::Conv2d<T>> output_;
};

struct AnchorConfig {
  std::vector<double> scales{4.0};
  std::vector<double> ratios{0.5, 1.0, 2.0};
};

AnchorGrid pyramid_anchors(ImageSize image, std::span<const int> strides,
                           const AnchorConfig& cfg);

/// Per-image raw RPN outputs with levels concatenated in anchor order.
template <typename T>
struct RpnOutputs {
  nn::Tensor<T> objectness;  // [N, A_total] logits
  nn::Tensor<T> deltas;      // [N, A_total, 4]

  /// Slices of image n: objectness [A_total], deltas [A_total, 4].
  nn::Tensor<T> objectness_of(int n) const;
  nn::Tensor<T> deltas_of(int n) const;
};

template <typename T>
class RpnHead : public nn::Module<T> {
 public:
  RpnHead() = default;
  RpnHead(int channels, int anchors_per_cell, nn::Rng& rng);

  RpnOutputs<T> operator()(const FeaturePyramid<T>& pyramid) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;

 private:
  int anchors_per_cell_ = 0;
  nn::Conv2d<T> conv_;
  nn::Conv2d<T> cls_;
  nn::Conv2d<T> reg_;
};

struct ProposalParams {
  int pre_nms_top_n = 1000;   // per level
  int post_nms_top_n = 1000;  // 1000 at training, 300 at test
  double nms_threshold = 0.7;
  double min_size = 1e-3;
  /// Proposals with sigmoid objectness below this are dropped.
  double score_floor = 0.0;
};

enum class ProposalSource { kRpn, kLoop };

struct ProposalSet {
  std::vector<Box> boxes;    // clipped to the image
  std::vector<double> scores;  // descending
  ProposalSource source = ProposalSource::kRpn;
  int loop = 0;
};

/// Per-level top-k by objectness, decode (unit normalization), clip, drop
/// tiny boxes, NMS, cap. Values only; nothing is differentiated.
template <typename T>
ProposalSet rpn_proposals(const nn::Tensor<T>& objectness, const nn::Tensor<T>& deltas,
                          const AnchorGrid& anchors, ImageSize image,
                          const ProposalParams& params);

struct RpnLossParams {
  double positive_iou = 0.7;
  double negative_iou = 0.3;
  /// Each gt's best anchors become positive when their IoU reaches this.
  double min_best_iou = 0.3;
  int batch_size = 256;
  double positive_fraction = 0.5;
  double smooth_l1_beta = 1.0 / 9.0;
};

template <typename T>
struct RpnLoss {
  nn::Tensor<T> objectness;
  nn::Tensor<T> box;
  int num_positive = 0;
  int num_negative = 0;
};

/// Anchor labels: 1 positive, 0 negative, -1 ignored.
std::vector<int> label_anchors(std::span<const Box> anchors, std::span<const Box> gts,
                               const RpnLossParams& params,
                               std::vector<int>* matched_gt = nullptr);

/// Mean BCE over sampled anchors; smooth-L1 over positives divided by the
/// number of sampled anchors.
template <typename T>
RpnLoss<T> rpn_loss(const nn::Tensor<T>& objectness, const nn::Tensor<T>& deltas,
                    std::span<const Box> anchors, std::span<const Box> gts,
                    const RpnLossParams& params, std::uint64_t seed);

}  // namespace sbr
