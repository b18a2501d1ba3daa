// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sbr {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Eigen::MatrixXd iou_matrix(std::span<const Box> a, std::span<const Box> b) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(a.size()),
                      static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out(i, j) = iou(a[i], b[j]);
  return out;
}

Box clip_box(const Box& box, ImageSize size) {
  const double w = size.width;
  const double h = size.height;
  Box out{std::clamp(box.x1, 0.0, w), std::clamp(box.y1, 0.0, h),
          std::clamp(box.x2, 0.0, w), std::clamp(box.y2, 0.0, h)};
  out.x2 = std::max(out.x2, out.x1);
  out.y2 = std::max(out.y2, out.y1);
  return out;
}

std::size_t AnchorGrid::total() const {
  std::size_t n = 0;
  for (const auto& level : levels) n += level.anchors.size();
  return n;
}

std::vector<Box> AnchorGrid::flatten() const {
  std::vector<Box> out;
  out.reserve(total());
  for (const auto& level : levels)
    out.insert(out.end(), level.anchors.begin(), level.anchors.end());
  return out;
}

AnchorGrid generate_anchors(ImageSize image, std::span<const int> strides,
                            std::span<const double> scales,
                            std::span<const double> ratios) {
  if (scales.empty() || ratios.empty())
    throw std::invalid_argument("generate_anchors: scales and ratios must be non-empty");
  AnchorGrid grid;
  grid.scales.assign(scales.begin(), scales.end());
  grid.ratios.assign(ratios.begin(), ratios.end());
  for (int stride : strides) {
    if (stride <= 0) throw std::invalid_argument("generate_anchors: stride must be positive");
    AnchorLevel level;
    level.stride = stride;
    level.rows = std::max(1, (image.height + stride - 1) / stride);
    level.cols = std::max(1, (image.width + stride - 1) / stride);
    level.anchors.reserve(static_cast<std::size_t>(level.rows) * level.cols *
                          grid.anchors_per_cell());
    for (int r = 0; r < level.rows; ++r) {
      for (int c = 0; c < level.cols; ++c) {
        const double cx = (c + 0.5) * stride;
        const double cy = (r + 0.5) * stride;
        for (double scale : scales) {
          const double side = scale * stride;
          for (double ratio : ratios) {
            const double half_w = 0.5 * side / std::sqrt(ratio);
            const double half_h = 0.5 * side * std::sqrt(ratio);
            level.anchors.push_back({cx - half_w, cy - half_h, cx + half_w, cy + half_h});
          }
        }
      }
    }
    grid.levels.push_back(std::move(level));
  }
  return grid;
}

std::size_t LabelAssignment::num_positive() const {
  return static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](int l) { return l > 0; }));
}

LabelAssignment assign_labels(std::span<const Box> proposals,
                              std::span<const LabeledBox> gts, double threshold) {
  LabelAssignment out;
  out.labels.assign(proposals.size(), 0);
  out.matched_gt.assign(proposals.size(), std::nullopt);
  out.matched_iou.assign(proposals.size(), 0.0);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    double best = -1.0;
    int best_j = -1;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double v = iou(proposals[i], gts[j].box);
      if (v > best) {  // strict: lowest index wins ties
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j < 0) continue;
    out.matched_iou[i] = best;
    if (best >= threshold) {
      out.labels[i] = gts[best_j].label;
      out.matched_gt[i] = best_j;
    }
  }
  return out;
}

namespace {
constexpr double kMaxLogRatio = 4.135166556742356;  // log(1000 / 16)
}

BoxDeltas encode_deltas(const Box& proposal, const Box& target,
                        const DeltaNormalization& norm) {
  const double pw = proposal.width();
  const double ph = proposal.height();
  if (!(pw > 0.0) || !(ph > 0.0))
    throw std::invalid_argument("encode_deltas: proposal must have positive area");
  const double tw = std::max(target.width(), 1e-12);
  const double th = std::max(target.height(), 1e-12);
  return {(target.center_x() - proposal.center_x()) / pw / norm.std_x,
          (target.center_y() - proposal.center_y()) / ph / norm.std_y,
          std::log(tw / pw) / norm.std_w, std::log(th / ph) / norm.std_h};
}

Box decode_deltas(const Box& proposal, const BoxDeltas& deltas,
                  const DeltaNormalization& norm) {
  const double pw = proposal.width();
  const double ph = proposal.height();
  const double dw = std::clamp(deltas.dw * norm.std_w, -kMaxLogRatio, kMaxLogRatio);
  const double dh = std::clamp(deltas.dh * norm.std_h, -kMaxLogRatio, kMaxLogRatio);
  const double cx = proposal.center_x() + deltas.dx * norm.std_x * pw;
  const double cy = proposal.center_y() + deltas.dy * norm.std_y * ph;
  const double w = pw * std::exp(dw);
  const double h = ph * std::exp(dh);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<int> sample_proposals(const LabelAssignment& assignment, int total,
                                  double pos_fraction, std::uint64_t seed) {
  if (total <= 0) throw std::invalid_argument("sample_proposals: total must be positive");
  std::vector<int> pos;
  std::vector<int> neg;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    (assignment.labels[i] > 0 ? pos : neg).push_back(static_cast<int>(i));

  std::mt19937_64 rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);

  const auto max_pos = static_cast<std::size_t>(std::floor(pos_fraction * total));
  const std::size_t num_pos = std::min(pos.size(), max_pos);
  const std::size_t num_neg = std::min(neg.size(), static_cast<std::size_t>(total) - num_pos);

  std::vector<int> out(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(num_pos));
  out.insert(out.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(num_neg));
  return out;
}

std::vector<int> nms(std::span<const Box> boxes, std::span<const double> scores,
                     double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> keep;
  std::vector<char> removed(boxes.size(), 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const int i = order[oi];
    if (removed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int j = order[oj];
      if (!removed[j] && iou(boxes[i], boxes[j]) > iou_threshold) removed[j] = 1;
    }
  }
  return keep;
}

}  // namespace sbr
