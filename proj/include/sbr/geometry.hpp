// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace sbr {

/// Axis-aligned box in continuous pixel coordinates, corner form.
///
/// Coordinates are half-open: a box (10, 10, 30, 30) covers the pixels whose
/// centers lie in [10, 30) on both axes, so its area is 400 with no +1 term.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 >= x1 && y2 >= y1; }

  friend bool operator==(const Box&, const Box&) = default;
};

struct ImageSize {
  int width = 0;
  int height = 0;
};

/// Intersection over union; 0 when disjoint or when the union is empty.
double iou(const Box& a, const Box& b);

/// Pairwise IoU, rows index `a`, columns index `b`.
Eigen::MatrixXd iou_matrix(std::span<const Box> a, std::span<const Box> b);

Box clip_box(const Box& box, ImageSize size);

// ---------------------------------------------------------------------------
// Anchors

struct AnchorLevel {
  int stride = 0;
  int rows = 0;
  int cols = 0;
  /// Row-major over cells, then scales, then ratios.
  std::vector<Box> anchors;
};

struct AnchorGrid {
  std::vector<AnchorLevel> levels;
  std::vector<double> scales;
  std::vector<double> ratios;

  std::size_t anchors_per_cell() const { return scales.size() * ratios.size(); }
  std::size_t total() const;
  std::vector<Box> flatten() const;
};

/// Anchor of side `scale * stride` centered at ((col + 0.5) * stride,
/// (row + 0.5) * stride). `ratio` is height / width at constant area.
AnchorGrid generate_anchors(ImageSize image, std::span<const int> strides,
                            std::span<const double> scales,
                            std::span<const double> ratios);

// ---------------------------------------------------------------------------
// Label assignment

struct LabeledBox {
  Box box;
  int label = 0;  // 1..K
};

struct LabelAssignment {
  std::vector<int> labels;  // 0 = background
  std::vector<std::optional<int>> matched_gt;
  std::vector<double> matched_iou;

  std::size_t size() const { return labels.size(); }
  std::size_t num_positive() const;
};

/// Each proposal takes the class of its highest-IoU ground truth when that
/// IoU reaches `threshold`; ties resolve to the lowest gt index.
/// `matched_iou` is the max IoU regardless of the threshold; `matched_gt` is
/// set only for positives.
LabelAssignment assign_labels(std::span<const Box> proposals,
                              std::span<const LabeledBox> gts, double threshold);

// ---------------------------------------------------------------------------
// Regression targets

struct BoxDeltas {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;
};

/// Target standard deviations divided out at encode time and multiplied back
/// at decode time; means are zero.
struct DeltaNormalization {
  double std_x = 0.1;
  double std_y = 0.1;
  double std_w = 0.2;
  double std_h = 0.2;

  static DeltaNormalization identity() { return {1.0, 1.0, 1.0, 1.0}; }
};

/// Throws std::invalid_argument when the proposal has non-positive area.
BoxDeltas encode_deltas(const Box& proposal, const Box& target,
                        const DeltaNormalization& norm = {});

/// Log-size deltas are clamped to log(1000 / 16) before exponentiation.
Box decode_deltas(const Box& proposal, const BoxDeltas& deltas,
                  const DeltaNormalization& norm = {});

// ---------------------------------------------------------------------------
// Sampling and suppression

/// Fixed-size RoI batch: at most floor(pos_fraction * total) positives, the
/// remainder filled with negatives. Positives come first in the result.
std::vector<int> sample_proposals(const LabelAssignment& assignment, int total,
                                  double pos_fraction, std::uint64_t seed);

/// Greedy NMS; returns kept indices ordered by descending score. Equal
/// scores keep input order.
std::vector<int> nms(std::span<const Box> boxes, std::span<const double> scores,
                     double iou_threshold);

}  // namespace sbr
