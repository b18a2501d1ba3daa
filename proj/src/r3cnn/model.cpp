// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sbr/r3cnn.hpp"

namespace sbr {

using nn::Tensor;

// ---------------------------------------------------------------- loop config

std::vector<double> threshold_schedule(int train_loops) {
  if (train_loops < 1 || train_loops > 5)
    throw std::invalid_argument("threshold_schedule: train_loops must be in [1, 5], got " +
                                std::to_string(train_loops));
  if (train_loops == 2) return {0.5, 0.7};
  std::vector<double> out;
  for (int t = 0; t < train_loops; ++t) out.push_back((5 + t) / 10.0);
  return out;
}

std::vector<double> default_alphas(int train_loops) {
  std::vector<double> out;
  for (int t = 0; t < train_loops; ++t) out.push_back(std::ldexp(1.0, -t));
  return out;
}

int alternation_select(int t, const std::string& alternation) {
  if (alternation.empty()) throw std::invalid_argument("alternation_select: empty alternation");
  if (t < 1) throw std::invalid_argument("alternation_select: loops are numbered from 1");
  const char c = alternation[static_cast<std::size_t>(t - 1) % alternation.size()];
  if (c < 'a' || c > 'z') throw std::invalid_argument("alternation_select: malformed alternation '" + alternation + "'");
  return c - 'a';
}

std::vector<double> LoopConfig::effective_thresholds() const {
  return thresholds.empty() ? threshold_schedule(train_loops) : thresholds;
}

std::vector<double> LoopConfig::effective_alphas() const {
  return alpha.empty() ? default_alphas(train_loops) : alpha;
}

std::string LoopConfig::effective_alternation() const {
  return alternation.empty() ? std::string(static_cast<std::size_t>(std::max(train_loops, 0)), 'a') : alternation;
}

void validate_loop_config(const LoopConfig& cfg) {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("loops." + key + ": " + why);
  };
  if (cfg.train_loops < 1 || cfg.train_loops > 5) fail("train_loops", "must be in [1, 5]");
  if (cfg.eval_loops < 0) fail("eval_loops", "must be >= 1 (or 0 for train_loops)");
  if (cfg.head_pairs < 1 || cfg.head_pairs > 26) fail("head_pairs", "must be in [1, 26]");
  const auto thr = cfg.effective_thresholds();
  if (static_cast<int>(thr.size()) != cfg.train_loops) fail("thresholds", "need one threshold per training loop");
  for (std::size_t i = 0; i < thr.size(); ++i) {
    if (thr[i] < 0.5 - 1e-12 || thr[i] > 0.9 + 1e-12) fail("thresholds", "values must lie in [0.5, 0.9]");
    if (i > 0 && !(thr[i] > thr[i - 1])) fail("thresholds", "must be strictly increasing");
  }
  const auto alpha = cfg.effective_alphas();
  if (static_cast<int>(alpha.size()) != cfg.train_loops) fail("alpha", "need one weight per training loop");
  for (double a : alpha)
    if (!(a >= 0.0) || !std::isfinite(a)) fail("alpha", "weights must be finite and non-negative");
  const auto alt = cfg.effective_alternation();
  if (static_cast<int>(alt.size()) != cfg.train_loops) fail("alternation", "length must equal train_loops");
  for (char c : alt) {
    if (c < 'a' || c > 'z') fail("alternation", "letters a-z only");
    if (c - 'a' >= cfg.head_pairs) fail("alternation", std::string("pair '") + c + "' exceeds head_pairs");
  }
}

// ---------------------------------------------------------------- samples

std::vector<Sample> make_samples(const GeneratedDataset& dataset) {
  const auto& m = dataset.manifest;
  if (m.images.size() != dataset.images.size())
    throw std::invalid_argument("make_samples: manifest and image list differ in length");
  std::vector<Sample> out;
  out.reserve(m.images.size());
  for (std::size_t i = 0; i < m.images.size(); ++i) {
    const auto& rec = m.images[i];
    const auto& img = dataset.images[i];
    Sample s;
    s.image_id = rec.id;
    s.size = {img.width, img.height};
    s.pixels.resize(img.pixels.size());
    for (std::size_t p = 0; p < img.pixels.size(); ++p) s.pixels[p] = (static_cast<float>(img.pixels[p]) - 128.f) / 64.f;
    for (const auto* a : m.annotations_for(rec.id)) {
      s.gts.push_back({a->box, a->category_id});
      s.masks.push_back(decode_rle(a->segmentation));
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
Tensor<T> image_tensor(const Sample& s) {
  nn::Buffer<T> v(s.pixels.begin(), s.pixels.end());
  return Tensor<T>({1, 1, s.size.height, s.size.width}, std::move(v));
}

namespace {

// Bilinear read of a 0/1 mask at continuous pixel-index coordinates; zero
// outside the image.
double mask_bilinear(const Mask& m, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double lx = x - x0, ly = y - y0;
  auto at = [&](int xi, int yi) -> double {
    if (xi < 0 || yi < 0 || xi >= m.width || yi >= m.height) return 0.0;
    return m.at(xi, yi);
  };
  return (1 - ly) * ((1 - lx) * at(x0, y0) + lx * at(x0 + 1, y0)) +
         ly * ((1 - lx) * at(x0, y0 + 1) + lx * at(x0 + 1, y0 + 1));
}

}  // namespace

std::vector<float> mask_target(const Mask& mask, const Box& box, int size) {
  std::vector<float> out(static_cast<std::size_t>(size) * size, 0.f);
  const double bw = box.width() / size, bh = box.height() / size;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      // Pixel k covers [k, k+1), so its value sits at k + 0.5.
      const double x = box.x1 + (j + 0.5) * bw - 0.5, y = box.y1 + (i + 0.5) * bh - 0.5;
      out[static_cast<std::size_t>(i) * size + j] = mask_bilinear(mask, x, y) >= 0.5 ? 1.f : 0.f;
    }
  return out;
}

Mask paste_mask(std::span<const float> probs, int size, const Box& box, ImageSize image) {
  Mask out(image.width, image.height);
  if (!(box.width() > 0) || !(box.height() > 0)) return out;
  const int xa = std::max(0, static_cast<int>(std::floor(box.x1)));
  const int ya = std::max(0, static_cast<int>(std::floor(box.y1)));
  const int xb = std::min(image.width, static_cast<int>(std::ceil(box.x2)));
  const int yb = std::min(image.height, static_cast<int>(std::ceil(box.y2)));
  for (int y = ya; y < yb; ++y)
    for (int x = xa; x < xb; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      if (cx < box.x1 || cx > box.x2 || cy < box.y1 || cy > box.y2) continue;
      const double u = std::clamp((cx - box.x1) / box.width() * size - 0.5, 0.0, size - 1.0);
      const double v = std::clamp((cy - box.y1) / box.height() * size - 0.5, 0.0, size - 1.0);
      const int u0 = static_cast<int>(u), v0 = static_cast<int>(v);
      const int u1 = std::min(u0 + 1, size - 1), v1 = std::min(v0 + 1, size - 1);
      const double lu = u - u0, lv = v - v0;
      auto p = [&](int a, int b) { return static_cast<double>(probs[static_cast<std::size_t>(b) * size + a]); };
      const double val = (1 - lv) * ((1 - lu) * p(u0, v0) + lu * p(u1, v0)) + lv * ((1 - lu) * p(u0, v1) + lu * p(u1, v1));
      if (val >= 0.5) out.at(x, y) = 1;
    }
  return out;
}

// ---------------------------------------------------------------- model

template <typename T>
R3Model<T>::R3Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate_loop_config(cfg.loops);
  nn::Rng rng(seed);
  const int c = cfg.head.in_channels;
  backbone = Backbone<T>(cfg.backbone, rng);
  fpn = Fpn<T>(backbone.out_channels(), backbone.strides(), c, rng);
  rpn = RpnHead<T>(c, static_cast<int>(cfg.anchors.scales.size() * cfg.anchors.ratios.size()), rng);
  if (cfg.use_groie) {
    const int levels = static_cast<int>(backbone.strides().size());
    det_groie = GroieExtractor<T>(cfg.groie, c, levels, rng);
    mask_groie = GroieExtractor<T>(cfg.groie, c, levels, rng);
  }
  for (int h = 0; h < cfg.loops.head_pairs; ++h) {
    HeadPair p{DetectionHead<T>(cfg.head, rng), MaskHead<T>(cfg.head, rng), std::nullopt};
    if (cfg.head.maskiou_enabled) p.maskiou.emplace(cfg.head, rng);
    pairs.push_back(std::move(p));
  }
}

template <typename T>
FeaturePyramid<T> R3Model<T>::features(const Tensor<T>& image) const {
  return fpn(backbone(image));
}

template <typename T>
AnchorGrid R3Model<T>::anchors(ImageSize image) const {
  const auto strides = backbone.strides();
  return pyramid_anchors(image, strides, cfg_.anchors);
}

template <typename T>
Tensor<T> R3Model<T>::extract_det(const FeaturePyramid<T>& pyramid, const RoiRequest& rois) const {
  const RoiAlignParams p{7, cfg_.sampling_ratio, true};
  return cfg_.use_groie ? det_groie(pyramid, rois, p) : baseline_extract(pyramid, rois, p, cfg_.level_rule);
}

template <typename T>
Tensor<T> R3Model<T>::extract_mask(const FeaturePyramid<T>& pyramid, const RoiRequest& rois) const {
  const RoiAlignParams p{14, cfg_.sampling_ratio, true};
  return cfg_.use_groie ? mask_groie(pyramid, rois, p) : baseline_extract(pyramid, rois, p, cfg_.level_rule);
}

template <typename T>
void R3Model<T>::collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const {
  backbone.collect_parameters(nn::join_name(prefix, "backbone"), out);
  fpn.collect_parameters(nn::join_name(prefix, "fpn"), out);
  rpn.collect_parameters(nn::join_name(prefix, "rpn"), out);
  if (cfg_.use_groie) {
    det_groie.collect_parameters(nn::join_name(prefix, "det_roi"), out);
    mask_groie.collect_parameters(nn::join_name(prefix, "mask_roi"), out);
  }
  for (std::size_t h = 0; h < pairs.size(); ++h) {
    const std::string p = nn::join_name(prefix, std::string("pair_") + static_cast<char>('a' + h));
    pairs[h].det.collect_parameters(nn::join_name(p, "det"), out);
    pairs[h].mask.collect_parameters(nn::join_name(p, "mask"), out);
    if (pairs[h].maskiou) pairs[h].maskiou->collect_parameters(nn::join_name(p, "maskiou"), out);
  }
}

template Tensor<float> image_tensor<float>(const Sample&);
template Tensor<double> image_tensor<double>(const Sample&);
template class R3Model<float>;
template class R3Model<double>;

}  // namespace sbr
