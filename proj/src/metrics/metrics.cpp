// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/metrics.hpp"

#include <algorithm>
#include <array>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace sbr {

namespace {

struct AreaRange {
  double lo, hi;
};

// all, small, medium, large in pixel area (COCO constants).
constexpr AreaRange kAreas[] = {{0, 1e10}, {0, 32.0 * 32.0}, {32.0 * 32.0, 96.0 * 96.0}, {96.0 * 96.0, 1e10}};

double mask_iou(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height) throw std::invalid_argument("evaluate: mask size mismatch");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] && b.bits[i];
    uni += a.bits[i] || b.bits[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct Gt {
  Box box;
  Mask mask;
  double area;
};

// Matching outcome of one (image, category, area range, threshold).
struct ImageEval {
  std::vector<double> scores;       // kept detections, descending
  std::vector<bool> matched;        // per detection
  std::vector<bool> ignored;        // per detection
  std::int64_t num_gt = 0;          // non-ignored
};

double mean_valid(const std::vector<double>& v) {
  double s = 0;
  int n = 0;
  for (double x : v)
    if (x > -1) {
      s += x;
      ++n;
    }
  return n == 0 ? -1.0 : s / n;
}

}  // namespace

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

double interpolated_ap(std::span<const bool> tp, std::int64_t num_gt) {
  if (num_gt <= 0) return -1.0;
  const std::size_t nd = tp.size();
  std::vector<double> rc(nd), pr(nd);
  std::int64_t ctp = 0, cfp = 0;
  for (std::size_t i = 0; i < nd; ++i) {
    (tp[i] ? ctp : cfp) += 1;
    rc[i] = static_cast<double>(ctp) / static_cast<double>(num_gt);
    pr[i] = static_cast<double>(ctp) / (static_cast<double>(ctp + cfp) + 2.220446049250313e-16);
  }
  for (std::size_t i = nd; i-- > 1;) pr[i - 1] = std::max(pr[i - 1], pr[i]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double thr = r / 100.0;
    // First index whose recall reaches thr.
    const auto it = std::lower_bound(rc.begin(), rc.end(), thr);
    if (it != rc.end()) sum += pr[static_cast<std::size_t>(it - rc.begin())];
  }
  return sum / 101.0;
}

EvalResult evaluate(std::span<const Detection> detections, const DatasetManifest& manifest, EvalTask task,
                    const EvalParams& params) {
  const bool segm = task == EvalTask::kSegm;
  std::map<int, std::size_t> image_index;
  for (std::size_t i = 0; i < manifest.images.size(); ++i) image_index[manifest.images[i].id] = i;
  std::vector<int> cats;
  for (const auto& c : manifest.categories) cats.push_back(c.id);
  std::sort(cats.begin(), cats.end());

  // (image, category) -> gts / detections
  std::map<std::pair<int, int>, std::vector<Gt>> gts;
  for (const auto& a : manifest.annotations) {
    Gt g{a.box, segm ? decode_rle(a.segmentation) : Mask{}, static_cast<double>(a.area)};
    gts[{a.image_id, a.category_id}].push_back(std::move(g));
  }
  std::map<std::pair<int, int>, std::vector<const Detection*>> dts;
  for (const auto& d : detections) {
    if (!image_index.count(d.image_id))
      throw std::invalid_argument("evaluate: prediction references unknown image id " + std::to_string(d.image_id));
    if (segm && !d.mask) throw std::invalid_argument("evaluate: segmentation prediction without a mask");
    dts[{d.image_id, d.category_id}].push_back(&d);
  }

  const auto thresholds = coco_iou_thresholds();
  const std::size_t nt = thresholds.size();
  // precision-style AP per [threshold][category][area]
  std::vector<std::vector<std::array<double, 4>>> ap(nt, std::vector<std::array<double, 4>>(cats.size()));

  for (std::size_t ci = 0; ci < cats.size(); ++ci) {
    const int cat = cats[ci];
    for (int ai = 0; ai < 4; ++ai) {
      const AreaRange range = kAreas[ai];
      std::vector<std::vector<ImageEval>> per_thr(nt);
      for (const auto& rec : manifest.images) {
        static const std::vector<Gt> kNoGt;
        static const std::vector<const Detection*> kNoDt;
        const auto git = gts.find({rec.id, cat});
        const auto dit = dts.find({rec.id, cat});
        const auto& g = git == gts.end() ? kNoGt : git->second;
        auto d = dit == dts.end() ? kNoDt : dit->second;
        if (g.empty() && d.empty()) continue;
        std::stable_sort(d.begin(), d.end(), [](const auto* a, const auto* b) { return a->score > b->score; });
        if (static_cast<int>(d.size()) > params.max_detections) d.resize(static_cast<std::size_t>(params.max_detections));

        // Ground truths outside the range are ignored and visited last.
        std::vector<std::size_t> gorder(g.size());
        std::iota(gorder.begin(), gorder.end(), 0);
        auto g_ignored = [&](std::size_t k) { return g[k].area < range.lo || g[k].area > range.hi; };
        std::stable_sort(gorder.begin(), gorder.end(),
                         [&](std::size_t a, std::size_t b) { return !g_ignored(a) && g_ignored(b); });
        std::vector<std::vector<double>> ious(d.size(), std::vector<double>(g.size()));
        for (std::size_t i = 0; i < d.size(); ++i)
          for (std::size_t k = 0; k < g.size(); ++k)
            ious[i][k] = segm ? mask_iou(*d[i]->mask, g[gorder[k]].mask) : iou(d[i]->box, g[gorder[k]].box);

        std::int64_t num_gt = 0;
        for (std::size_t k = 0; k < g.size(); ++k) num_gt += !g_ignored(gorder[k]);
        for (std::size_t ti = 0; ti < nt; ++ti) {
          ImageEval ev;
          ev.num_gt = num_gt;
          std::vector<bool> gt_taken(g.size(), false);
          for (std::size_t i = 0; i < d.size(); ++i) {
            double best = std::min(thresholds[ti], 1.0 - 1e-10);
            int m = -1;
            for (std::size_t k = 0; k < g.size(); ++k) {
              if (gt_taken[k]) continue;
              if (m > -1 && !g_ignored(gorder[static_cast<std::size_t>(m)]) && g_ignored(gorder[k])) break;
              if (ious[i][k] < best) continue;
              best = ious[i][k];
              m = static_cast<int>(k);
            }
            bool matched = false, ignored = false;
            if (m > -1) {
              gt_taken[static_cast<std::size_t>(m)] = true;
              matched = true;
              ignored = g_ignored(gorder[static_cast<std::size_t>(m)]);
            } else {
              const double area = segm ? static_cast<double>(d[i]->mask->area()) : d[i]->box.area();
              ignored = area < range.lo || area > range.hi;
            }
            ev.scores.push_back(d[i]->score);
            ev.matched.push_back(matched);
            ev.ignored.push_back(ignored);
          }
          per_thr[ti].push_back(std::move(ev));
        }
      }
      for (std::size_t ti = 0; ti < nt; ++ti) {
        // Concatenate in image order, then a stable sort by score.
        std::vector<std::pair<double, bool>> all;
        std::int64_t num_gt = 0;
        for (const auto& ev : per_thr[ti]) {
          num_gt += ev.num_gt;
          for (std::size_t i = 0; i < ev.scores.size(); ++i)
            if (!ev.ignored[i]) all.emplace_back(ev.scores[i], ev.matched[i]);
        }
        std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        // std::vector<bool> is not contiguous, so the flags live in a plain array.
        std::unique_ptr<bool[]> tp(new bool[all.size() + 1]);
        for (std::size_t i = 0; i < all.size(); ++i) tp[i] = all[i].second;
        ap[ti][ci][static_cast<std::size_t>(ai)] = interpolated_ap(std::span<const bool>(tp.get(), all.size()), num_gt);
      }
    }
  }

  auto collect = [&](int area, int only_thr) {
    std::vector<double> v;
    for (std::size_t ti = 0; ti < nt; ++ti) {
      if (only_thr >= 0 && static_cast<int>(ti) != only_thr) continue;
      for (std::size_t ci = 0; ci < cats.size(); ++ci) v.push_back(ap[ti][ci][static_cast<std::size_t>(area)]);
    }
    return mean_valid(v);
  };
  EvalResult r;
  r.task = task;
  r.summary.ap = collect(0, -1);
  r.summary.ap50 = collect(0, 0);
  r.summary.ap75 = collect(0, 5);
  r.summary.ap_small = collect(1, -1);
  r.summary.ap_medium = collect(2, -1);
  r.summary.ap_large = collect(3, -1);
  for (std::size_t ci = 0; ci < cats.size(); ++ci) {
    std::vector<double> v;
    for (std::size_t ti = 0; ti < nt; ++ti) v.push_back(ap[ti][ci][0]);
    r.per_class.emplace_back(cats[ci], mean_valid(v));
  }
  return r;
}

std::string EvalResult::to_text() const {
  std::ostringstream os;
  os << (task == EvalTask::kBbox ? "bbox" : "segm") << std::fixed << std::setprecision(4) << "  AP " << summary.ap
     << "  AP50 " << summary.ap50 << "  AP75 " << summary.ap75 << "  AP_s " << summary.ap_small << "  AP_m "
     << summary.ap_medium << "  AP_l " << summary.ap_large << "\n";
  for (const auto& [cat, v] : per_class) os << "  class " << cat << "  AP " << v << "\n";
  return os.str();
}

std::string EvalResult::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task == EvalTask::kBbox ? "bbox" : "segm";
  j["AP"] = summary.ap;
  j["AP50"] = summary.ap50;
  j["AP75"] = summary.ap75;
  j["AP_s"] = summary.ap_small;
  j["AP_m"] = summary.ap_medium;
  j["AP_l"] = summary.ap_large;
  j["per_class"] = nlohmann::ordered_json::object();
  for (const auto& [cat, v] : per_class) j["per_class"][std::to_string(cat)] = v;
  return j.dump(2);
}

}  // namespace sbr
