// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sbr/geometry.hpp"
#include "sbr/synthdata.hpp"

namespace sbr {

struct Detection {
  int image_id = 0;
  int category_id = 0;
  Box box;
  double score = 0.0;
  /// Full-image mask; required for segmentation evaluation.
  std::optional<Mask> mask;
};

enum class EvalTask { kBbox, kSegm };

/// Headline numbers. A stratum without ground truth reports -1.
struct ApSummary {
  double ap = -1, ap50 = -1, ap75 = -1, ap_small = -1, ap_medium = -1, ap_large = -1;
};

struct EvalResult {
  EvalTask task = EvalTask::kBbox;
  ApSummary summary;
  /// category id -> AP over IoU 0.50:0.95, all areas (-1 without gt).
  std::vector<std::pair<int, double>> per_class;

  std::string to_text() const;
  std::string to_json() const;
};

struct EvalParams {
  int max_detections = 100;  // per image and category
};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

/// 101-point interpolated AP of one ranked list: `tp` flags in descending
/// score order, `num_gt` non-ignored ground truths. -1 when num_gt == 0.
double interpolated_ap(std::span<const bool> tp, std::int64_t num_gt);

/// Throws std::invalid_argument for predictions on unknown images or
/// segmentation predictions without masks.
EvalResult evaluate(std::span<const Detection> detections, const DatasetManifest& manifest, EvalTask task,
                    const EvalParams& params = {});

}  // namespace sbr
