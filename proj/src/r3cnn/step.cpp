// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <tuple>

#include "sbr/nn/losses.hpp"
#include "sbr/nn/ops.hpp"
#include "sbr/r3cnn.hpp"

namespace sbr {

using nn::Tensor;

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
Tensor<T> zero() {
  return Tensor<T>::scalar(T(0));
}

// Delta slice used to move proposal i: its label for positives, otherwise
// the highest-scoring foreground class.
template <typename T>
int refine_class(const DetectionOutput<T>& out, std::int64_t i, int label) {
  if (out.deltas.dim(1) == 1) return 0;
  if (label > 0) return label - 1;
  const auto k1 = out.class_logits.dim(1);
  const T* row = out.class_logits.data() + i * k1;
  return static_cast<int>(std::max_element(row + 1, row + k1) - (row + 1));
}

template <typename T>
Box decode_row(const DetectionOutput<T>& out, std::int64_t i, int cls, const Box& box,
               const DeltaNormalization& norm) {
  const T* d = out.deltas.data() + (i * out.deltas.dim(1) + cls) * 4;
  return decode_deltas(box, {double(d[0]), double(d[1]), double(d[2]), double(d[3])}, norm);
}

// Refined, clipped, de-duplicated boxes for the next loop.
std::vector<Box> unique_valid(const std::vector<Box>& boxes, ImageSize size) {
  std::vector<Box> out;
  std::set<std::tuple<double, double, double, double>> seen;
  for (const auto& raw : boxes) {
    const Box b = clip_box(raw, size);
    if (!(b.width() > 1e-3) || !(b.height() > 1e-3)) continue;
    if (seen.insert({b.x1, b.y1, b.x2, b.y2}).second) out.push_back(b);
  }
  return out;
}

double binary_iou(std::span<const float> a, std::span<const float> b) {
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] >= 0.5f, y = b[i] >= 0.5f;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

double combine_losses(std::span<const double> alpha, std::span<const double> loop_sums, double rpn) {
  if (alpha.size() != loop_sums.size()) throw std::invalid_argument("combine_losses: size mismatch");
  double total = rpn;
  for (std::size_t t = 0; t < alpha.size(); ++t) total += alpha[t] * loop_sums[t];
  return total;
}

template <typename T>
StepResult<T> train_step(const R3Model<T>& model, const Sample& sample, const StepOptions& opt) {
  const ModelConfig& cfg = model.config();
  const LoopConfig& lc = cfg.loops;
  const auto thresholds = lc.effective_thresholds();
  const auto alphas = lc.effective_alphas();
  const auto alternation = lc.effective_alternation();
  const int loops = lc.train_loops;
  if (opt.replay && static_cast<int>(opt.replay->loops.size()) != loops)
    throw std::invalid_argument("train_step: replay plan has the wrong number of loops");
  if (!opt.loop_enabled.empty() && static_cast<int>(opt.loop_enabled.size()) != loops)
    throw std::invalid_argument("train_step: loop_enabled needs one flag per loop");

  std::vector<Box> gt_boxes;
  for (const auto& g : sample.gts) gt_boxes.push_back(g.box);

  StepResult<T> res;
  res.trace.loops.resize(static_cast<std::size_t>(loops));
  const auto pyramid = model.features(image_tensor<T>(sample));
  const auto rpn_out = model.rpn(pyramid);
  const auto anchors = model.anchors(sample.size).flatten();
  const auto rpn = rpn_loss(rpn_out.objectness_of(0), rpn_out.deltas_of(0), anchors, gt_boxes, cfg.rpn, mix(opt.seed, 0));
  res.rpn_objectness = rpn.objectness;
  res.rpn_box = rpn.box;

  std::vector<Box> proposals;
  if (opt.replay) {
    proposals = opt.replay->loops[0].proposals;
  } else {
    proposals = rpn_proposals(rpn_out.objectness_of(0), rpn_out.deltas_of(0), model.anchors(sample.size),
                              sample.size, cfg.train_proposals)
                    .boxes;
    if (cfg.add_gt_proposals) proposals.insert(proposals.end(), gt_boxes.begin(), gt_boxes.end());
  }
  if (opt.record) opt.record->loops.assign(static_cast<std::size_t>(loops), {});

  std::vector<Tensor<T>> terms;
  if (!opt.skip_rpn) {
    terms.push_back(rpn.objectness);
    terms.push_back(rpn.box);
  }

  for (int t = 0; t < loops; ++t) {
    const int pair_id = alternation_select(t + 1, alternation);
    const auto& pair = model.pairs.at(static_cast<std::size_t>(pair_id));
    LoopStats& stats = res.trace.loops[static_cast<std::size_t>(t)];
    stats.steps = 1;

    const auto assignment = assign_labels(proposals, sample.gts, thresholds[static_cast<std::size_t>(t)]);
    const std::vector<int> sampled =
        opt.replay ? opt.replay->loops[static_cast<std::size_t>(t)].sampled
                   : sample_proposals(assignment, cfg.rois_per_image, cfg.positive_fraction, mix(opt.seed, t + 1));
    if (opt.record) opt.record->loops[static_cast<std::size_t>(t)] = {proposals, sampled};

    RoiRequest rois;
    std::vector<int> labels;
    std::vector<BoxDeltas> targets;
    std::vector<int> matched;
    for (int idx : sampled) {
      const Box& b = proposals.at(static_cast<std::size_t>(idx));
      rois.boxes.push_back(b);
      rois.batch_index.push_back(0);
      labels.push_back(assignment.labels[static_cast<std::size_t>(idx)]);
      const auto& m = assignment.matched_gt[static_cast<std::size_t>(idx)];
      matched.push_back(m ? *m : -1);
      targets.push_back(m ? encode_deltas(b, sample.gts[static_cast<std::size_t>(*m)].box, cfg.box_norm) : BoxDeltas{});
      if (m) stats.add_positive(assignment.matched_iou[static_cast<std::size_t>(idx)]);
      else ++stats.negatives;
    }

    LoopLosses<T> ll{zero<T>(), zero<T>(), zero<T>(), zero<T>(), pair_id};
    std::vector<Box> next;
    if (!rois.boxes.empty()) {
      const auto det = pair.det(model.extract_det(pyramid, rois));
      const auto dl = detection_loss(det, labels, targets, cfg.box_beta);
      ll.cls = dl.cls;
      ll.box = dl.box;
      if (t + 1 < loops && !opt.replay) {
        for (std::size_t i = 0; i < sampled.size(); ++i) {
          const auto row = static_cast<std::int64_t>(i);
          next.push_back(decode_row(det, row, refine_class(det, row, labels[i]), rois.boxes[i], cfg.box_norm));
        }
      }

      // Positives come first in the sample.
      RoiRequest pos;
      std::vector<int> pos_labels;
      nn::Buffer<T> mask_targets;
      std::vector<std::vector<float>> target_rows;
      for (std::size_t i = 0; i < sampled.size() && static_cast<int>(pos.size()) < cfg.max_mask_rois; ++i) {
        if (labels[i] <= 0) continue;
        pos.boxes.push_back(rois.boxes[i]);
        pos.batch_index.push_back(0);
        pos_labels.push_back(labels[i]);
        target_rows.push_back(mask_target(sample.masks.at(static_cast<std::size_t>(matched[i])), rois.boxes[i], 28));
        mask_targets.insert(mask_targets.end(), target_rows.back().begin(), target_rows.back().end());
      }
      if (!pos.boxes.empty()) {
        const auto p = static_cast<std::int64_t>(pos.size());
        const auto feats = model.extract_mask(pyramid, pos);
        const auto logits = pair.mask(feats, t + 1);
        const Tensor<T> tgt({p, 28, 28}, std::move(mask_targets));
        ll.mask = mask_loss(logits, pos_labels, tgt);
        if (pair.maskiou) {
          const auto probs = nn::sigmoid(select_class_masks(logits, pos_labels)).detach();
          const auto k = static_cast<std::int64_t>(cfg.head.num_classes);
          const auto pred = (*pair.maskiou)(feats, nn::reshape(probs, {p, 1, 28, 28}));
          std::vector<int> rows;
          nn::Buffer<T> iou_t;
          for (std::int64_t i = 0; i < p; ++i) {
            rows.push_back(static_cast<int>(i * k + pos_labels[static_cast<std::size_t>(i)] - 1));
            std::vector<float> pr(probs.data() + i * 784, probs.data() + (i + 1) * 784);
            iou_t.push_back(static_cast<T>(binary_iou(pr, target_rows[static_cast<std::size_t>(i)])));
          }
          const auto chosen = nn::index_select(nn::reshape(pred, {p * k, 1}), rows);
          ll.maskiou = nn::scale(nn::squared_error(chosen, Tensor<T>({p, 1}, std::move(iou_t))),
                                 static_cast<T>(1.0 / static_cast<double>(p)));
        }
      }
    }
    stats.cls_loss = ll.cls.item();
    stats.box_loss = ll.box.item();
    stats.mask_loss = ll.mask.item();
    stats.maskiou_loss = ll.maskiou.item();

    const bool enabled = opt.loop_enabled.empty() || opt.loop_enabled[static_cast<std::size_t>(t)];
    if (enabled) {
      Tensor<T> loop_sum = nn::add_n<T>({ll.cls, ll.box, ll.mask, nn::scale(ll.maskiou, static_cast<T>(cfg.maskiou_weight))});
      terms.push_back(nn::scale(loop_sum, static_cast<T>(alphas[static_cast<std::size_t>(t)])));
    }
    res.loops.push_back(ll);

    if (t + 1 < loops) proposals = opt.replay ? opt.replay->loops[static_cast<std::size_t>(t + 1)].proposals
                                              : unique_valid(next, sample.size);
  }
  res.total = terms.empty() ? zero<T>() : nn::add_n(terms);
  return res;
}

template StepResult<float> train_step<float>(const R3Model<float>&, const Sample&, const StepOptions&);
template StepResult<double> train_step<double>(const R3Model<double>&, const Sample&, const StepOptions&);

}  // namespace sbr
