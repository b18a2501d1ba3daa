// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sbr/geometry.hpp"
#include "sbr/r3cnn.hpp"

namespace sbr {

// ---------------------------------------------------------------------------
// Anchor coverage

/// Miss percentage per IoU bin: bins [lo, lo + 0.05) over [0.3, 1.0); a gt
/// misses bin b when its best-anchor IoU is below b.lo.
struct CoverageCurve {
  std::vector<double> bin_lo, bin_hi;
  std::vector<double> miss_percent;
  std::vector<double> best_iou;  // per gt

  /// Miss percentage of the bin starting at `lo` (a multiple of 0.05).
  double miss_at(double lo) const;
};

/// Max IoU of each gt over all anchors; 0 without anchors.
std::vector<double> best_anchor_iou(std::span<const Box> anchors, std::span<const Box> gts);

/// Throws std::invalid_argument for an empty gt list.
CoverageCurve evgt_curve(std::span<const Box> anchors, std::span<const Box> gts);
CoverageCurve evgt_curve(const AnchorGrid& anchors, std::span<const Box> gts);

/// Boxes with uniform side in [min_side, max_side], aspect ratio in
/// [1/max_aspect, max_aspect] and uniform position fully inside the image.
std::vector<Box> random_gt_boxes(int count, ImageSize image, double min_side, double max_side, double max_aspect,
                                 std::uint64_t seed);

// ---------------------------------------------------------------------------
// IoU distribution of positive training samples

enum class RebalanceVerdict { kRebalanced, kNotRebalanced, kNotApplicable };
const char* verdict_name(RebalanceVerdict v);

struct LoopHistogram {
  int loop = 0;  // 1-based
  std::array<std::int64_t, 10> counts{};  // bins of 0.05 over [0.5, 1.0]
  std::int64_t positives = 0;
  std::int64_t negatives = 0;
  double median = 0.0;
  double mean = 0.0;
  double mass_above_07 = 0.0;
};

struct RebalancingReport {
  std::vector<LoopHistogram> loops;
  /// Loops without positives; reported but ignored by the verdict.
  std::vector<int> excluded_loops;
  RebalanceVerdict verdict = RebalanceVerdict::kNotApplicable;

  std::string to_text() const;
};

/// Aggregates the traces (for example one per epoch to inspect, or several
/// files) and checks that medians strictly increase with the loop index.
/// Throws std::invalid_argument for an empty list.
RebalancingReport iou_rebalancing_report(std::span<const LoopTrace> traces);

// ---------------------------------------------------------------------------
// CSV and plots

/// Schema `bin_lo,bin_hi,value[,loop]` with a mandatory header.
struct CsvRow {
  double bin_lo = 0.0;
  double bin_hi = 0.0;
  double value = 0.0;
  std::optional<int> loop;

  friend bool operator==(const CsvRow&, const CsvRow&) = default;
};

std::vector<CsvRow> to_rows(const CoverageCurve& curve);
/// One row per loop and bin; value is the sample count.
std::vector<CsvRow> to_rows(const RebalancingReport& report);

std::string format_csv(std::span<const CsvRow> rows);
/// Throws std::invalid_argument on a bad header or malformed row.
std::vector<CsvRow> parse_csv(const std::string& text);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

/// Writes `<stem>.csv` and `<stem>.svg` next to each other. Rows with a loop
/// column become grouped bars, one colour per loop.
void emit_plot(std::span<const CsvRow> rows, const std::filesystem::path& stem, const std::string& title,
               const std::string& y_label);

}  // namespace sbr
