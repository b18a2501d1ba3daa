// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "sbr/nn/ops.hpp"
#include "sbr/r3cnn.hpp"

namespace sbr {

using nn::Tensor;

std::vector<std::vector<double>> average_scores(const std::vector<std::vector<std::vector<double>>>& per_loop) {
  if (per_loop.empty()) return {};
  std::vector<std::vector<double>> avg = per_loop.front();
  for (std::size_t l = 1; l < per_loop.size(); ++l) {
    if (per_loop[l].size() != avg.size()) throw std::invalid_argument("average_scores: ragged loops");
    for (std::size_t i = 0; i < avg.size(); ++i)
      for (std::size_t c = 0; c < avg[i].size(); ++c) avg[i][c] += per_loop[l][i][c];
  }
  const double n = static_cast<double>(per_loop.size());
  for (auto& row : avg)
    for (auto& v : row) v /= n;
  return avg;
}

template <typename T>
std::vector<InstancePrediction> infer(const R3Model<T>& model, const Sample& sample, InferenceTrace* trace) {
  const ModelConfig& cfg = model.config();
  const LoopConfig& lc = cfg.loops;
  const int eval_loops = lc.effective_eval_loops();
  if (eval_loops < 1) throw std::invalid_argument("infer: eval_loops must be >= 1");
  const auto alternation = lc.effective_alternation();
  const int k = cfg.head.num_classes;
  nn::NoGradGuard no_grad;

  const auto pyramid = model.features(image_tensor<T>(sample));
  const auto rpn_out = model.rpn(pyramid);
  std::vector<Box> boxes = rpn_proposals(rpn_out.objectness_of(0), rpn_out.deltas_of(0),
                                         model.anchors(sample.size), sample.size, cfg.test_proposals)
                               .boxes;
  std::vector<InstancePrediction> out;
  if (boxes.empty()) return out;
  const auto n = static_cast<std::int64_t>(boxes.size());

  std::vector<std::vector<std::vector<double>>> per_loop;
  std::vector<Box> input = boxes;
  DetectionOutput<T> last;
  for (int t = 1; t <= eval_loops; ++t) {
    const auto& pair = model.pairs.at(static_cast<std::size_t>(alternation_select(t, alternation)));
    RoiRequest rois{input, std::vector<int>(input.size(), 0)};
    last = pair.det(model.extract_det(pyramid, rois));
    const auto probs = nn::softmax(last.class_logits);
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(n), std::vector<double>(k + 1));
    for (std::int64_t i = 0; i < n; ++i)
      for (int c = 0; c <= k; ++c) rows[i][c] = probs.data()[i * (k + 1) + c];
    per_loop.push_back(rows);
    if (trace) {
      trace->boxes.push_back(input);
      trace->probs.push_back(rows);
    }
    if (t == eval_loops) break;
    // Move each box with the deltas of its most likely foreground class.
    std::vector<Box> next(input.size());
    for (std::int64_t i = 0; i < n; ++i) {
      const int cls = last.deltas.dim(1) == 1
                          ? 0
                          : static_cast<int>(std::max_element(rows[i].begin() + 1, rows[i].end()) - (rows[i].begin() + 1));
      const T* d = last.deltas.data() + (i * last.deltas.dim(1) + cls) * 4;
      Box b = clip_box(decode_deltas(input[i], {double(d[0]), double(d[1]), double(d[2]), double(d[3])}, cfg.box_norm),
                       sample.size);
      // Keep degenerate refinements at their previous position.
      next[i] = (b.width() > 1e-3 && b.height() > 1e-3) ? b : input[i];
    }
    input = std::move(next);
  }
  const auto avg = average_scores(per_loop);
  if (trace) trace->averaged = avg;

  // Per-class decode from the last loop, score floor, per-class NMS.
  for (int c = 1; c <= k; ++c) {
    std::vector<Box> cand;
    std::vector<double> scores;
    for (std::int64_t i = 0; i < n; ++i) {
      if (avg[i][c] < cfg.score_floor) continue;
      const int slot = last.deltas.dim(1) == 1 ? 0 : c - 1;
      const T* d = last.deltas.data() + (i * last.deltas.dim(1) + slot) * 4;
      const Box b = clip_box(decode_deltas(input[i], {double(d[0]), double(d[1]), double(d[2]), double(d[3])}, cfg.box_norm),
                             sample.size);
      if (!(b.width() > 1e-3) || !(b.height() > 1e-3)) continue;
      cand.push_back(b);
      scores.push_back(avg[i][c]);
    }
    for (int keep : nms(cand, scores, cfg.nms_threshold)) {
      InstancePrediction p;
      p.image_id = sample.image_id;
      p.category_id = c;
      p.box = cand[keep];
      p.score = scores[keep];
      out.push_back(std::move(p));
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  if (static_cast<int>(out.size()) > cfg.max_detections) out.resize(static_cast<std::size_t>(cfg.max_detections));
  if (out.empty()) return out;

  const int iterations = lc.mask_iterations_follow_eval ? eval_loops : lc.train_loops;
  const auto& pair = model.pairs.at(static_cast<std::size_t>(alternation_select(eval_loops, alternation)));
  RoiRequest rois;
  std::vector<int> labels;
  for (const auto& p : out) {
    rois.boxes.push_back(p.box);
    rois.batch_index.push_back(0);
    labels.push_back(p.category_id);
  }
  const auto feats = model.extract_mask(pyramid, rois);
  const auto probs = nn::sigmoid(select_class_masks(pair.mask(feats, iterations), labels));
  std::vector<double> quality(out.size(), 1.0);
  if (pair.maskiou) {
    const auto m = static_cast<std::int64_t>(out.size());
    const auto pred = (*pair.maskiou)(feats, nn::reshape(probs, {m, 1, 28, 28}));
    for (std::int64_t i = 0; i < m; ++i) quality[i] = std::clamp(double(pred.data()[i * k + labels[i] - 1]), 0.0, 1.0);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::vector<float> pm(probs.data() + i * 784, probs.data() + (i + 1) * 784);
    out[i].mask = paste_mask(pm, 28, out[i].box, sample.size);
    out[i].mask_score = out[i].score * quality[i];
  }
  return out;
}

template std::vector<InstancePrediction> infer<float>(const R3Model<float>&, const Sample&, InferenceTrace*);
template std::vector<InstancePrediction> infer<double>(const R3Model<double>&, const Sample&, InferenceTrace*);

}  // namespace sbr
