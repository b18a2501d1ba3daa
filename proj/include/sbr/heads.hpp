// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sbr/geometry.hpp"
#include "sbr/nn/layers.hpp"
#include "sbr/nonlocal.hpp"

namespace sbr {

/// Detection trunk variants. b..e name the lightweight convolutional trunks;
/// the last two place the non-local block after the trunk.
enum class DetVariant {
  kFcBaseline,     // two shared FC layers
  kL2c7x7,         // b
  kL2cRect,        // c
  kL2c7x7NlB,      // d
  kL2cRectNlB,     // e
  kL2c7x7NlA,
  kL2c7x7NlBNlA,
};

const char* det_variant_name(DetVariant v);
/// Accepts "fc_baseline", "l2c_7x7", "l2c_rect", "l2c_7x7+nl_b", "l2c_rect+nl_b",
/// "l2c_7x7+nl_a", "l2c_7x7+nl_b+nl_a".
DetVariant parse_det_variant(const std::string& name);
bool variant_is_rect(DetVariant v);
bool variant_has_nl_before(DetVariant v);
bool variant_has_nl_after(DetVariant v);

struct HeadConfig {
  DetVariant det_variant = DetVariant::kL2c7x7;
  bool maskiou_enabled = false;
  DetVariant maskiou_variant = DetVariant::kL2c7x7;
  int num_classes = 3;
  /// RoI feature channels C. The convolutional trunks go C -> C/2 -> C/4.
  int in_channels = 256;
  /// Width of the FC layers in the baseline trunk and the original mask-IoU branch.
  int fc_dim = 1024;
  /// One box regression for all classes instead of one per class.
  bool class_agnostic_regression = false;
  /// Convolutions in the mask body M1.
  int mask_convs = 4;
  NonLocalConfig nonlocal;
};

/// One counted layer: display name, exact weight+bias count, shape summary.
struct ParamRow {
  std::string name;
  std::int64_t count = 0;
  std::string description;
};

struct ParamTable {
  std::vector<ParamRow> rows;
  std::int64_t total() const;
  const ParamRow* find(const std::string& name) const;
  std::string to_text() const;
  std::string to_json() const;
};

/// Rows derived from the parameter names of any module, grouped by layer
/// (the name up to the last '.').
template <typename T>
ParamTable count_params(const nn::Module<T>& module);

/// A module together with the display name used in parameter tables.
template <typename T>
struct NamedLayer {
  std::string name;
  const nn::Module<T>* module;
};

template <typename T>
ParamTable count_params(const std::vector<NamedLayer<T>>& layers);

/// Shared trunk applied to n x C x 7 x 7 RoI features: the FC pair or the
/// convolutional replacement, with optional non-local blocks. Output is
/// flattened to [n, flat_size()].
template <typename T>
class Trunk : public nn::Module<T> {
 public:
  Trunk() = default;
  Trunk(DetVariant variant, int in_channels, int fc_dim, const NonLocalConfig& nl, nn::Rng& rng);

  nn::Tensor<T> operator()(const nn::Tensor<T>& x) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;
  int flat_size() const { return flat_; }
  DetVariant variant() const { return variant_; }
  std::vector<NamedLayer<T>> layers() const;

 private:
  DetVariant variant_ = DetVariant::kFcBaseline;
  int flat_ = 0;
  std::vector<nn::Linear<T>> fcs_;
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<std::string> conv_names_;
  std::shared_ptr<NonLocalBlock<T>> nl_before_, nl_after_;
};

template <typename T>
struct DetectionOutput {
  nn::Tensor<T> class_logits;  // [n, K+1], column 0 is background
  nn::Tensor<T> deltas;        // [n, K, 4], or [n, 1, 4] when class agnostic
};

template <typename T>
class DetectionHead : public nn::Module<T> {
 public:
  DetectionHead() = default;
  DetectionHead(const HeadConfig& cfg, nn::Rng& rng);

  /// Rejects inputs that are not n x C x 7 x 7.
  DetectionOutput<T> operator()(const nn::Tensor<T>& roi_features) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;
  std::vector<NamedLayer<T>> layers() const;
  const HeadConfig& config() const { return cfg_; }

 private:
  HeadConfig cfg_;
  Trunk<T> trunk_;
  nn::Linear<T> cls_, reg_;
};

/// Mask head with the internal refinement loop:
///   m^0 = M1(x + C1(0)),  m^i = M1(x + C1(m^{i-1})) for i < j,
///   output = C2(U(m^{j-1})) with U a learned 2x upsampling (14 -> 28).
template <typename T>
class MaskHead : public nn::Module<T> {
 public:
  MaskHead() = default;
  MaskHead(const HeadConfig& cfg, nn::Rng& rng);

  /// x: n x C x 14 x 14; iterations j >= 1. Returns n x K x 28 x 28 logits.
  nn::Tensor<T> operator()(const nn::Tensor<T>& x, int iterations) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;

  /// Number of M1 applications performed by the last forward call.
  int last_m1_applications() const { return m1_calls_; }

 private:
  nn::Tensor<T> body(const nn::Tensor<T>& x) const;

  int channels_ = 0;
  std::vector<nn::Conv2d<T>> m1_;
  nn::Conv2d<T> c1_;
  nn::ConvTranspose2x2<T> up_;
  nn::Conv2d<T> c2_;
  mutable int m1_calls_ = 0;
};

/// Mask quality branch: the 14x14 mask features concatenated with the
/// max-pooled predicted mask, four 3x3 convolutions (the last with stride 2),
/// then the configured trunk and a final projection to K scores.
template <typename T>
class MaskIouHead : public nn::Module<T> {
 public:
  MaskIouHead() = default;
  MaskIouHead(const HeadConfig& cfg, nn::Rng& rng);

  /// features: n x C x 14 x 14; mask_probs: n x 1 x 28 x 28 for the chosen class.
  /// Returns [n, K] predicted IoUs.
  nn::Tensor<T> operator()(const nn::Tensor<T>& features, const nn::Tensor<T>& mask_probs) const;
  void collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const override;
  std::vector<NamedLayer<T>> layers() const;

 private:
  std::vector<nn::Conv2d<T>> convs_;
  Trunk<T> trunk_;
  nn::Linear<T> out_;  // the third FC of the original branch
};

/// Classification and box-regression losses of one loop. Labels are 0 for
/// background and 1..K otherwise; `target_deltas` holds one row per proposal
/// (ignored for background).
template <typename T>
struct DetectionLoss {
  nn::Tensor<T> cls;
  nn::Tensor<T> box;  // summed smooth-L1 over positives / number of proposals
  int num_positive = 0;
};

template <typename T>
DetectionLoss<T> detection_loss(const DetectionOutput<T>& out, std::span<const int> labels,
                                std::span<const BoxDeltas> target_deltas,
                                double beta = 1.0);

/// Per-proposal logits of the labelled class: [n, K, H, W] -> [n, H, W].
template <typename T>
nn::Tensor<T> select_class_masks(const nn::Tensor<T>& mask_logits, std::span<const int> labels);

/// Mean binary cross entropy of the labelled class masks against targets [n, 28, 28].
template <typename T>
nn::Tensor<T> mask_loss(const nn::Tensor<T>& mask_logits, std::span<const int> labels,
                        const nn::Tensor<T>& targets);

/// Parity tables at in_channels = 256: the eight-row layer comparison and
/// full-head totals for every trunk variant.
ParamTable layer_comparison_table();
ParamTable variant_totals_table(int num_classes = 80);

}  // namespace sbr
