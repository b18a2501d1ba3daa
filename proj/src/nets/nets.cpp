// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/nets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "sbr/nn/losses.hpp"
#include "sbr/nn/ops.hpp"

namespace sbr {

using nn::Tensor;

// ---------------------------------------------------------------------------
// Backbone

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
  if (cfg.num_stages < 1 || cfg.width < 1 || cfg.in_channels < 1)
    throw std::invalid_argument("Backbone: invalid configuration");
  const auto init = nn::Init::kaiming_fan_out();
  auto block = [&](int in, int out, int stride, bool zero_gamma) {
    return Block{nn::Conv2d<T>(in, out, 3, 3, {stride, stride, 1, 1}, init, rng, false),
                 nn::GroupNorm<T>(out, nn::group_count(out), zero_gamma)};
  };
  stem_ = block(cfg.in_channels, cfg.width, 2, false);
  int in = cfg.width;
  for (int s = 0; s < cfg.num_stages; ++s) {
    const int out = cfg.width << s;
    stages_.emplace_back(block(in, out, 2, false), block(out, out, 1, cfg.zero_init_last_norm));
    in = out;
  }
}

template <typename T>
Tensor<T> Backbone<T>::run(const Block& b, const Tensor<T>& x) const {
  return nn::relu(b.norm(b.conv(x)));
}

template <typename T>
std::vector<Tensor<T>> Backbone<T>::operator()(const Tensor<T>& image) const {
  if (image.rank() != 4 || image.dim(1) != cfg_.in_channels)
    throw std::invalid_argument("Backbone: expected [N, C_in, H, W], got " +
                                nn::shape_string(image.shape()));
  const int big = strides().back();
  const int ph = static_cast<int>((big - image.dim(2) % big) % big);
  const int pw = static_cast<int>((big - image.dim(3) % big) % big);
  Tensor<T> x = (ph || pw) ? nn::pad_bottom_right(image, ph, pw) : image;
  x = run(stem_, x);
  std::vector<Tensor<T>> out;
  for (const auto& [down, body] : stages_) {
    x = run(body, run(down, x));
    out.push_back(x);
  }
  return out;
}

template <typename T>
void Backbone<T>::collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const {
  auto add = [&](const Block& b, const std::string& name) {
    b.conv.collect_parameters(nn::join_name(prefix, name + ".conv"), out);
    b.norm.collect_parameters(nn::join_name(prefix, name + ".norm"), out);
  };
  add(stem_, "stem");
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    add(stages_[s].first, "stage" + std::to_string(s + 1) + ".down");
    add(stages_[s].second, "stage" + std::to_string(s + 1) + ".body");
  }
}

template <typename T>
std::vector<int> Backbone<T>::out_channels() const {
  std::vector<int> c;
  for (int s = 0; s < cfg_.num_stages; ++s) c.push_back(cfg_.width << s);
  return c;
}

template <typename T>
std::vector<int> Backbone<T>::strides() const {
  std::vector<int> s;
  for (int i = 0; i < cfg_.num_stages; ++i) s.push_back(4 << i);
  return s;
}

// ---------------------------------------------------------------------------
// FPN

template <typename T>
Fpn<T>::Fpn(const std::vector<int>& in_channels, const std::vector<int>& strides, int channels,
            nn::Rng& rng)
    : channels_(channels), strides_(strides) {
  if (in_channels.empty() || in_channels.size() != strides.size())
    throw std::invalid_argument("Fpn: channel and stride lists must match");
  for (int c : in_channels) {
    lateral_.emplace_back(c, channels, 1, 1, nn::Conv2dSpec{}, nn::Init::kaiming_fan_in(), rng);
    output_.push_back(nn::Conv2d<T>::same(channels, channels, 3, nn::Init::kaiming_fan_in(), rng));
  }
}

template <typename T>
FeaturePyramid<T> Fpn<T>::operator()(const std::vector<Tensor<T>>& features) const {
  if (features.size() != lateral_.size())
    throw std::invalid_argument("Fpn: wrong number of input levels");
  const std::size_t n = features.size();
  std::vector<Tensor<T>> merged(n);
  merged[n - 1] = lateral_[n - 1](features[n - 1]);
  for (std::size_t i = n - 1; i-- > 0;)
    merged[i] = nn::add(lateral_[i](features[i]), nn::upsample_nearest(merged[i + 1], 2));
  FeaturePyramid<T> out;
  out.strides = strides_;
  out.channels = channels_;
  for (std::size_t i = 0; i < n; ++i) out.levels.push_back(output_[i](merged[i]));
  return out;
}

template <typename T>
void Fpn<T>::collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const {
  for (std::size_t i = 0; i < lateral_.size(); ++i) {
    lateral_[i].collect_parameters(nn::join_name(prefix, "lateral" + std::to_string(i)), out);
    output_[i].collect_parameters(nn::join_name(prefix, "output" + std::to_string(i)), out);
  }
}

AnchorGrid pyramid_anchors(ImageSize image, std::span<const int> strides,
                           const AnchorConfig& cfg) {
  return generate_anchors(image, strides, cfg.scales, cfg.ratios);
}

// ---------------------------------------------------------------------------
// RPN

template <typename T>
Tensor<T> RpnOutputs<T>::objectness_of(int n) const {
  const int row[] = {n};
  return nn::reshape(nn::index_select(objectness, row), {objectness.dim(1)});
}

template <typename T>
Tensor<T> RpnOutputs<T>::deltas_of(int n) const {
  const int row[] = {n};
  return nn::reshape(nn::index_select(deltas, row), {deltas.dim(1), 4});
}

template <typename T>
RpnHead<T>::RpnHead(int channels, int anchors_per_cell, nn::Rng& rng)
    : anchors_per_cell_(anchors_per_cell) {
  conv_ = nn::Conv2d<T>::same(channels, channels, 3, nn::Init::normal(0.01), rng);
  cls_ = nn::Conv2d<T>(channels, anchors_per_cell, 1, 1, {}, nn::Init::normal(0.01), rng);
  reg_ = nn::Conv2d<T>(channels, 4 * anchors_per_cell, 1, 1, {}, nn::Init::normal(0.01), rng);
}

template <typename T>
RpnOutputs<T> RpnHead<T>::operator()(const FeaturePyramid<T>& pyramid) const {
  std::vector<Tensor<T>> obj, reg;
  for (const auto& level : pyramid.levels) {
    const auto n = level.dim(0);
    const auto cells = level.dim(2) * level.dim(3);
    const Tensor<T> h = nn::relu(conv_(level));
    // [N, A, H, W] -> [N, H, W, A]: cells row-major, then anchors.
    obj.push_back(nn::reshape(nn::permute(cls_(h), {0, 2, 3, 1}), {n, cells * anchors_per_cell_}));
    reg.push_back(
        nn::reshape(nn::permute(reg_(h), {0, 2, 3, 1}), {n, cells * anchors_per_cell_, 4}));
  }
  return {nn::concat(obj, 1), nn::concat(reg, 1)};
}

template <typename T>
void RpnHead<T>::collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const {
  conv_.collect_parameters(nn::join_name(prefix, "conv"), out);
  cls_.collect_parameters(nn::join_name(prefix, "cls"), out);
  reg_.collect_parameters(nn::join_name(prefix, "reg"), out);
}

template <typename T>
ProposalSet rpn_proposals(const Tensor<T>& objectness, const Tensor<T>& deltas,
                          const AnchorGrid& anchors, ImageSize image,
                          const ProposalParams& params) {
  if (objectness.numel() != static_cast<std::int64_t>(anchors.total()) ||
      deltas.numel() != 4 * objectness.numel())
    throw std::invalid_argument("rpn_proposals: outputs do not match the anchor grid");
  const auto obj = objectness.values();
  const auto del = deltas.values();
  const auto norm = DeltaNormalization::identity();

  std::vector<Box> boxes;
  std::vector<double> scores;
  std::size_t offset = 0;
  for (const auto& level : anchors.levels) {
    const std::size_t count = level.anchors.size();
    std::vector<int> order(count);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t k = std::min<std::size_t>(count, static_cast<std::size_t>(params.pre_nms_top_n));
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      const T sa = obj[offset + a], sb = obj[offset + b];
      return sa > sb || (sa == sb && a < b);
    });
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t i = offset + order[r];
      const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(obj[i])));
      if (score < params.score_floor) continue;
      const BoxDeltas d{del[4 * i], del[4 * i + 1], del[4 * i + 2], del[4 * i + 3]};
      const Box b = clip_box(decode_deltas(level.anchors[order[r]], d, norm), image);
      if (b.width() < params.min_size || b.height() < params.min_size) continue;
      boxes.push_back(b);
      scores.push_back(score);
    }
    offset += count;
  }

  ProposalSet out;
  const auto keep = nms(boxes, scores, params.nms_threshold);
  const std::size_t cap = std::min<std::size_t>(keep.size(), static_cast<std::size_t>(params.post_nms_top_n));
  for (std::size_t r = 0; r < cap; ++r) {
    out.boxes.push_back(boxes[keep[r]]);
    out.scores.push_back(scores[keep[r]]);
  }
  return out;
}

std::vector<int> label_anchors(std::span<const Box> anchors, std::span<const Box> gts,
                               const RpnLossParams& params, std::vector<int>* matched_gt) {
  const std::size_t na = anchors.size();
  std::vector<int> labels(na, 0);
  if (matched_gt) matched_gt->assign(na, -1);
  if (gts.empty()) return labels;
  const Eigen::MatrixXd m = iou_matrix(anchors, gts);
  for (std::size_t a = 0; a < na; ++a) {
    Eigen::Index g;
    const double best = m.row(static_cast<Eigen::Index>(a)).maxCoeff(&g);
    if (best >= params.positive_iou) {
      labels[a] = 1;
      if (matched_gt) (*matched_gt)[a] = static_cast<int>(g);
    } else if (best >= params.negative_iou) {
      labels[a] = -1;
    }
  }
  // Low-quality matches: every anchor tying a gt's best IoU.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const double best = m.col(static_cast<Eigen::Index>(g)).maxCoeff();
    if (best < params.min_best_iou) continue;
    for (std::size_t a = 0; a < na; ++a)
      if (m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(g)) == best) {
        if (labels[a] != 1 && matched_gt) (*matched_gt)[a] = static_cast<int>(g);
        labels[a] = 1;
      }
  }
  return labels;
}

template <typename T>
RpnLoss<T> rpn_loss(const Tensor<T>& objectness, const Tensor<T>& deltas,
                    std::span<const Box> anchors, std::span<const Box> gts,
                    const RpnLossParams& params, std::uint64_t seed) {
  if (objectness.numel() != static_cast<std::int64_t>(anchors.size()) ||
      deltas.numel() != 4 * objectness.numel())
    throw std::invalid_argument("rpn_loss: outputs do not match the anchors");
  std::vector<int> matched;
  const auto labels = label_anchors(anchors, gts, params, &matched);
  std::vector<int> pos, neg;
  for (std::size_t a = 0; a < labels.size(); ++a) {
    if (labels[a] == 1) pos.push_back(static_cast<int>(a));
    else if (labels[a] == 0) neg.push_back(static_cast<int>(a));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const auto max_pos = static_cast<std::size_t>(params.batch_size * params.positive_fraction);
  pos.resize(std::min(pos.size(), max_pos));
  neg.resize(std::min(neg.size(), static_cast<std::size_t>(params.batch_size) - pos.size()));

  RpnLoss<T> out;
  out.num_positive = static_cast<int>(pos.size());
  out.num_negative = static_cast<int>(neg.size());
  std::vector<int> sampled = pos;
  sampled.insert(sampled.end(), neg.begin(), neg.end());
  if (sampled.empty()) {
    out.objectness = Tensor<T>::scalar(T(0));
    out.box = Tensor<T>::scalar(T(0));
    return out;
  }
  const auto a_total = objectness.numel();
  const Tensor<T> logits =
      nn::reshape(nn::index_select(nn::reshape(objectness, {a_total, 1}), sampled),
                  {static_cast<std::int64_t>(sampled.size())});
  Tensor<T> target({static_cast<std::int64_t>(sampled.size())}, T(0));
  std::fill_n(target.values().begin(), pos.size(), T(1));
  out.objectness = nn::bce_with_logits(logits, target);

  if (pos.empty()) {
    out.box = Tensor<T>::scalar(T(0));
    return out;
  }
  const auto norm = DeltaNormalization::identity();
  Tensor<T> reg_target({static_cast<std::int64_t>(pos.size()), 4}, T(0));
  for (std::size_t k = 0; k < pos.size(); ++k) {
    const auto d = encode_deltas(anchors[pos[k]], gts[matched[pos[k]]], norm);
    auto v = reg_target.values();
    v[4 * k] = static_cast<T>(d.dx);
    v[4 * k + 1] = static_cast<T>(d.dy);
    v[4 * k + 2] = static_cast<T>(d.dw);
    v[4 * k + 3] = static_cast<T>(d.dh);
  }
  const Tensor<T> pred = nn::index_select(nn::reshape(deltas, {a_total, 4}), pos);
  out.box = nn::scale(nn::smooth_l1(pred, reg_target, static_cast<T>(params.smooth_l1_beta)),
                      T(1) / static_cast<T>(sampled.size()));
  return out;
}

#define SBR_INSTANTIATE_NETS(T)                                                              \
  template class Backbone<T>;                                                                \
  template class Fpn<T>;                                                                     \
  template struct RpnOutputs<T>;                                                             \
  template class RpnHead<T>;                                                                 \
  template ProposalSet rpn_proposals<T>(const Tensor<T>&, const Tensor<T>&, const AnchorGrid&, \
                                        ImageSize, const ProposalParams&);                   \
  template RpnLoss<T> rpn_loss<T>(const Tensor<T>&, const Tensor<T>&, std::span<const Box>,   \
                                  std::span<const Box>, const RpnLossParams&, std::uint64_t);

SBR_INSTANTIATE_NETS(float)
SBR_INSTANTIATE_NETS(double)

}  // namespace sbr
