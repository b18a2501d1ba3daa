// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "sbr/analysis.hpp"
#include "sbr/nets.hpp"

using namespace sbr;

namespace {

AnchorGrid desk_anchors() {
  const int strides[] = {4, 8, 16, 32};
  return pyramid_anchors({64, 64}, strides, AnchorConfig{});
}

// Reference: per bin, count gts lacking any anchor at IoU >= lo.
std::vector<double> oracle_miss(const std::vector<Box>& anchors, const std::vector<Box>& gts) {
  std::vector<double> out;
  for (int b = 0; b < 14; ++b) {
    const double lo = 0.3 + 0.05 * b;
    int miss = 0;
    for (const auto& g : gts) {
      bool covered = false;
      for (const auto& a : anchors) covered = covered || iou(a, g) >= lo - 1e-12;
      miss += !covered;
    }
    out.push_back(100.0 * miss / static_cast<double>(gts.size()));
  }
  return out;
}

LoopTrace trace_with(const std::vector<std::vector<double>>& per_loop) {
  LoopTrace t;
  for (const auto& v : per_loop) {
    LoopStats s;
    for (double x : v) s.add_positive(x);
    s.steps = 1;
    t.loops.push_back(s);
  }
  return t;
}

}  // namespace

TEST_CASE("coverage of boxes that are anchors") {
  const auto grid = desk_anchors();
  const auto flat = grid.flatten();
  std::vector<Box> gts(flat.begin(), flat.begin() + 20);
  const auto c = evgt_curve(grid, gts);
  REQUIRE(c.bin_lo.size() == 14);
  CHECK(c.bin_lo.front() == doctest::Approx(0.30));
  CHECK(c.bin_hi.back() == doctest::Approx(1.00));
  for (double m : c.miss_percent) CHECK(m == 0.0);
}

TEST_CASE("poorly covered boxes miss everywhere") {
  const Box anchors[] = {{0, 0, 40, 40}};
  const std::vector<Box> gts{{50, 50, 52, 52}, {0, 0, 4, 4}};
  const auto c = evgt_curve(anchors, gts);
  for (double m : c.miss_percent) CHECK(m == 100.0);
  const auto empty = evgt_curve(std::span<const Box>{}, gts);
  for (double m : empty.miss_percent) CHECK(m == 100.0);
  CHECK_THROWS_AS(evgt_curve(anchors, std::span<const Box>{}), std::invalid_argument);
}

TEST_CASE("coverage matches all-pairs search and is monotone") {
  const auto flat = desk_anchors().flatten();
  REQUIRE(flat.size() <= 1100);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto gts = random_gt_boxes(50, {64, 64}, 8, 48, 2.0, seed);
    const auto c = evgt_curve(flat, gts);
    const auto ref = oracle_miss(flat, gts);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(c.miss_percent[i] == ref[i]);
    for (std::size_t i = 1; i < c.miss_percent.size(); ++i) CHECK(c.miss_percent[i] >= c.miss_percent[i - 1]);
    for (const auto& g : gts) {
      CHECK(g.x1 >= 0);
      CHECK(g.y2 <= 64);
    }
  }
}

TEST_CASE("rebalancing verdicts") {
  const LoopTrace good = trace_with({{0.52, 0.55, 0.58}, {0.6, 0.65, 0.7}, {0.7, 0.75, 0.8}});
  const LoopTrace traces[] = {good};
  const auto r = iou_rebalancing_report(traces);
  CHECK(r.verdict == RebalanceVerdict::kRebalanced);
  REQUIRE(r.loops.size() == 3);
  CHECK(r.loops[0].median < r.loops[1].median);
  CHECK(r.loops[2].mass_above_07 > r.loops[0].mass_above_07);
  CHECK(r.to_text().find("verdict: rebalanced") != std::string::npos);

  const LoopTrace single[] = {trace_with({{0.6, 0.7}})};
  CHECK(iou_rebalancing_report(single).verdict == RebalanceVerdict::kNotApplicable);

  const LoopTrace flat[] = {trace_with({{0.6, 0.7}, {0.6, 0.7}})};
  CHECK(iou_rebalancing_report(flat).verdict == RebalanceVerdict::kNotRebalanced);

  // An empty middle loop is excluded, not fatal.
  const LoopTrace gap[] = {trace_with({{0.55}, {}, {0.8}})};
  const auto g = iou_rebalancing_report(gap);
  CHECK(g.excluded_loops == std::vector<int>{2});
  CHECK(g.verdict == RebalanceVerdict::kRebalanced);
  CHECK_THROWS_AS(iou_rebalancing_report(std::span<const LoopTrace>{}), std::invalid_argument);

  // Several traces aggregate.
  const LoopTrace two[] = {good, good};
  CHECK(iou_rebalancing_report(two).loops[0].positives == 6);
}

TEST_CASE("CSV rows and round trip") {
  const auto gts = random_gt_boxes(200, {64, 64}, 8, 48, 2.0, 4);
  const auto c = evgt_curve(desk_anchors(), gts);
  const auto rows = to_rows(c);
  CHECK(rows.size() == 14);
  const auto text = format_csv(rows);
  CHECK(text.rfind("bin_lo,bin_hi,value\n", 0) == 0);
  CHECK(parse_csv(text) == rows);

  const LoopTrace t[] = {trace_with({{0.52, 0.9}, {0.61}, {0.77, 0.99}})};
  const auto hrows = to_rows(iou_rebalancing_report(t));
  CHECK(hrows.size() == 30);
  const auto htext = format_csv(hrows);
  CHECK(htext.rfind("bin_lo,bin_hi,value,loop\n", 0) == 0);
  const auto back = parse_csv(htext);
  CHECK(back == hrows);
  CHECK(back[9].value == 0.0);  // loop 1: 0.9 sits in bin 8, the last bin is empty
  CHECK(back[8].value == 1.0);

  CHECK_THROWS_AS(parse_csv("lo,hi\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_csv("bin_lo,bin_hi,value\n0.1,0.2\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_csv("bin_lo,bin_hi,value\n0.1,0.2,x\n"), std::invalid_argument);
}

TEST_CASE("plot emission writes both files") {
  const auto dir = std::filesystem::temp_directory_path() / "sbr_test_plot";
  std::filesystem::remove_all(dir);
  const LoopTrace t[] = {trace_with({{0.52, 0.9}, {0.61}})};
  const auto rows = to_rows(iou_rebalancing_report(t));
  emit_plot(rows, dir / "iou_dist", "IoU distribution", "samples");
  CHECK(parse_csv(read_text_file(dir / "iou_dist.csv")) == rows);
  CHECK(read_text_file(dir / "iou_dist.svg").find("<svg") == 0);
  std::filesystem::remove_all(dir);
  CHECK_THROWS(emit_plot(rows, "/proc/forbidden/x", "t", "y"));
}
