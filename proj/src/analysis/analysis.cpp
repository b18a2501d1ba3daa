// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace sbr {

namespace {

constexpr int kCoverageBins = 14;  // [0.30, 1.00) in 0.05 steps

double coverage_lo(int i) { return (30 + 5 * i) / 100.0; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double CoverageCurve::miss_at(double lo) const {
  for (std::size_t i = 0; i < bin_lo.size(); ++i)
    if (std::abs(bin_lo[i] - lo) < 1e-9) return miss_percent[i];
  throw std::invalid_argument("CoverageCurve: no bin starts at " + fmt(lo));
}

std::vector<double> best_anchor_iou(std::span<const Box> anchors, std::span<const Box> gts) {
  std::vector<double> best(gts.size(), 0.0);
  for (std::size_t g = 0; g < gts.size(); ++g)
    for (const auto& a : anchors) best[g] = std::max(best[g], iou(a, gts[g]));
  return best;
}

CoverageCurve evgt_curve(std::span<const Box> anchors, std::span<const Box> gts) {
  if (gts.empty()) throw std::invalid_argument("evgt_curve: no ground-truth boxes");
  CoverageCurve c;
  c.best_iou = best_anchor_iou(anchors, gts);
  std::vector<double> sorted = c.best_iou;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < kCoverageBins; ++i) {
    const double lo = coverage_lo(i);
    c.bin_lo.push_back(lo);
    c.bin_hi.push_back(coverage_lo(i + 1));
    const auto below = std::lower_bound(sorted.begin(), sorted.end(), lo) - sorted.begin();
    c.miss_percent.push_back(100.0 * static_cast<double>(below) / static_cast<double>(gts.size()));
  }
  return c;
}

CoverageCurve evgt_curve(const AnchorGrid& anchors, std::span<const Box> gts) {
  const auto flat = anchors.flatten();
  return evgt_curve(std::span<const Box>(flat), gts);
}

std::vector<Box> random_gt_boxes(int count, ImageSize image, double min_side, double max_side, double max_aspect,
                                 std::uint64_t seed) {
  if (count < 0 || min_side <= 0 || max_side < min_side || max_aspect < 1.0)
    throw std::invalid_argument("random_gt_boxes: bad parameters");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> side(min_side, max_side), log_aspect(-std::log(max_aspect), std::log(max_aspect));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(out.size()) < count) {
    // Side is the geometric mean of width and height.
    const double s = side(rng), r = std::exp(log_aspect(rng));
    const double w = s / std::sqrt(r), h = s * std::sqrt(r);
    if (w > image.width || h > image.height) continue;
    const double x = unit(rng) * (image.width - w), y = unit(rng) * (image.height - h);
    out.push_back({x, y, x + w, y + h});
  }
  return out;
}

const char* verdict_name(RebalanceVerdict v) {
  switch (v) {
    case RebalanceVerdict::kRebalanced:
      return "rebalanced";
    case RebalanceVerdict::kNotRebalanced:
      return "not-rebalanced";
    case RebalanceVerdict::kNotApplicable:
      return "not-applicable";
  }
  return "?";
}

RebalancingReport iou_rebalancing_report(std::span<const LoopTrace> traces) {
  if (traces.empty()) throw std::invalid_argument("iou_rebalancing_report: no traces");
  LoopTrace all;
  for (const auto& t : traces) all.merge(t);
  RebalancingReport r;
  std::vector<double> medians;
  for (std::size_t l = 0; l < all.loops.size(); ++l) {
    const auto& s = all.loops[l];
    LoopHistogram h;
    h.loop = static_cast<int>(l) + 1;
    h.counts = s.histogram();
    h.positives = s.positives;
    h.negatives = s.negatives;
    h.median = s.median();
    h.mean = s.mean();
    h.mass_above_07 = s.mass_above(0.7);
    if (s.positives == 0) r.excluded_loops.push_back(h.loop);
    else medians.push_back(h.median);
    r.loops.push_back(h);
  }
  if (medians.size() < 2) {
    r.verdict = RebalanceVerdict::kNotApplicable;
  } else {
    bool inc = true;
    for (std::size_t i = 1; i < medians.size(); ++i) inc = inc && medians[i] > medians[i - 1];
    r.verdict = inc ? RebalanceVerdict::kRebalanced : RebalanceVerdict::kNotRebalanced;
  }
  return r;
}

std::string RebalancingReport::to_text() const {
  std::ostringstream os;
  os << "loop  positives  negatives  median  mean    mass>=0.7\n";
  for (const auto& h : loops) {
    char line[128];
    std::snprintf(line, sizeof line, "%-5d %-10lld %-10lld %-7.4f %-7.4f %.4f\n", h.loop,
                  static_cast<long long>(h.positives), static_cast<long long>(h.negatives), h.median, h.mean,
                  h.mass_above_07);
    os << line;
  }
  for (int l : excluded_loops) os << "loop " << l << " has no positives and is excluded\n";
  os << "verdict: " << verdict_name(verdict) << "\n";
  return os.str();
}

// ---------------------------------------------------------------- CSV

std::vector<CsvRow> to_rows(const CoverageCurve& curve) {
  std::vector<CsvRow> rows;
  for (std::size_t i = 0; i < curve.bin_lo.size(); ++i)
    rows.push_back({curve.bin_lo[i], curve.bin_hi[i], curve.miss_percent[i], std::nullopt});
  return rows;
}

std::vector<CsvRow> to_rows(const RebalancingReport& report) {
  std::vector<CsvRow> rows;
  for (const auto& h : report.loops)
    for (int b = 0; b < 10; ++b)
      rows.push_back({(50 + 5 * b) / 100.0, (55 + 5 * b) / 100.0, static_cast<double>(h.counts[static_cast<std::size_t>(b)]),
                      h.loop});
  return rows;
}

std::string format_csv(std::span<const CsvRow> rows) {
  const bool with_loop = !rows.empty() && rows.front().loop.has_value();
  std::string out = with_loop ? "bin_lo,bin_hi,value,loop\n" : "bin_lo,bin_hi,value\n";
  for (const auto& r : rows) {
    if (r.loop.has_value() != with_loop) throw std::invalid_argument("format_csv: rows mix loop and no-loop");
    out += fmt(r.bin_lo) + "," + fmt(r.bin_hi) + "," + fmt(r.value);
    if (with_loop) out += "," + std::to_string(*r.loop);
    out += "\n";
  }
  return out;
}

std::vector<CsvRow> parse_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("parse_csv: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  bool with_loop;
  if (line == "bin_lo,bin_hi,value") with_loop = false;
  else if (line == "bin_lo,bin_hi,value,loop") with_loop = true;
  else throw std::invalid_argument("parse_csv: unexpected header '" + line + "'");
  std::vector<CsvRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.size() != (with_loop ? 4u : 3u))
      throw std::invalid_argument("parse_csv: line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                                  " fields");
    try {
      std::size_t used = 0;
      auto num = [&](const std::string& s) {
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing characters");
        return v;
      };
      CsvRow r{num(cells[0]), num(cells[1]), num(cells[2]), std::nullopt};
      if (with_loop) {
        r.loop = std::stoi(cells[3], &used);
        if (used != cells[3].size()) throw std::invalid_argument("trailing characters");
      }
      rows.push_back(r);
    } catch (const std::exception&) {
      throw std::invalid_argument("parse_csv: malformed number on line " + std::to_string(lineno));
    }
  }
  return rows;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- SVG

void emit_plot(std::span<const CsvRow> rows, const std::filesystem::path& stem, const std::string& title,
               const std::string& y_label) {
  auto csv_path = stem, svg_path = stem;
  csv_path += ".csv";
  svg_path += ".svg";
  write_text_file(csv_path, format_csv(rows));

  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 20, kTop = 40, kBottom = 50;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  double x0 = 1e300, x1 = -1e300, ymax = 0;
  int max_loop = 0;
  for (const auto& r : rows) {
    x0 = std::min(x0, r.bin_lo);
    x1 = std::max(x1, r.bin_hi);
    ymax = std::max(ymax, r.value);
    if (r.loop) max_loop = std::max(max_loop, *r.loop);
  }
  if (rows.empty()) x0 = 0, x1 = 1;
  if (ymax <= 0) ymax = 1;
  const int groups = std::max(max_loop, 1);
  static const char* kColors[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee"};
  auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return kTop + ph - y / ymax * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
  for (const auto& r : rows) {
    const int g = r.loop ? *r.loop - 1 : 0;
    const double bw = (sx(r.bin_hi) - sx(r.bin_lo)) / groups;
    const double x = sx(r.bin_lo) + g * bw;
    os << "<rect x=\"" << x << "\" y=\"" << sy(r.value) << "\" width=\"" << bw * 0.9 << "\" height=\""
       << sy(0) - sy(r.value) << "\" fill=\"" << kColors[g % 5] << "\"/>\n";
  }
  os << "<line x1=\"" << kLeft << "\" y1=\"" << sy(0) << "\" x2=\"" << kLeft + pw << "\" y2=\"" << sy(0)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << sy(0)
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = x0 + (x1 - x0) * i / 5.0, yv = ymax * i / 5.0;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", xv);
    os << "<text x=\"" << sx(xv) << "\" y=\"" << sy(0) + 18 << "\" text-anchor=\"middle\" font-size=\"11\">" << buf
       << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.3g", yv);
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << buf
       << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\" font-size=\"12\">IoU</text>\n";
  os << "<text x=\"14\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
     << kTop + ph / 2 << ")\">" << y_label << "</text>\n";
  if (max_loop > 0)
    for (int g = 0; g < groups; ++g)
      os << "<text x=\"" << kLeft + 10 + 70 * g << "\" y=\"" << kTop - 4 << "\" font-size=\"11\" fill=\"" << kColors[g % 5]
         << "\">loop " << g + 1 << "</text>\n";
  os << "</svg>\n";
  write_text_file(svg_path, os.str());
}

}  // namespace sbr
