// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/roi.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sbr/nn/ops.hpp"

namespace sbr {

using nn::Tensor;

namespace {

// Bilinear tap of one sample point: four plane offsets and weights already
// divided by the number of samples in the bin.
template <typename T>
struct Tap {
  int bin;
  int idx[4];
  T w[4];
};

template <typename T>
void add_taps(double y, double x, int h, int w, int bin, T scale, std::vector<Tap<T>>& taps) {
  if (y < -1.0 || y > h || x < -1.0 || x > w) return;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  int y1, x1;
  if (y0 >= h - 1) { y0 = y1 = h - 1; y = y0; } else { y1 = y0 + 1; }
  if (x0 >= w - 1) { x0 = x1 = w - 1; x = x0; } else { x1 = x0 + 1; }
  const double ly = y - y0, lx = x - x0, hy = 1.0 - ly, hx = 1.0 - lx;
  Tap<T> t;
  t.bin = bin;
  t.idx[0] = y0 * w + x0;
  t.idx[1] = y0 * w + x1;
  t.idx[2] = y1 * w + x0;
  t.idx[3] = y1 * w + x1;
  t.w[0] = static_cast<T>(hy * hx) * scale;
  t.w[1] = static_cast<T>(hy * lx) * scale;
  t.w[2] = static_cast<T>(ly * hx) * scale;
  t.w[3] = static_cast<T>(ly * lx) * scale;
  taps.push_back(t);
}

}  // namespace

template <typename T>
Tensor<T> roi_align(const Tensor<T>& features, const RoiRequest& rois, int stride,
                    const RoiAlignParams& params) {
  if (features.rank() != 4) throw std::invalid_argument("roi_align: features must be NCHW");
  if (rois.boxes.size() != rois.batch_index.size())
    throw std::invalid_argument("roi_align: boxes and batch indices differ in length");
  if (params.output_size < 1 || stride < 1)
    throw std::invalid_argument("roi_align: invalid output size or stride");
  const auto nb = features.dim(0), c = features.dim(1);
  const int h = static_cast<int>(features.dim(2)), w = static_cast<int>(features.dim(3));
  const int s = params.output_size;
  const auto n = static_cast<std::int64_t>(rois.size());
  const double offset = params.aligned ? 0.5 : 0.0;

  std::vector<std::vector<Tap<T>>> taps(rois.size());
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const Box& b = rois.boxes[r];
    if (rois.batch_index[r] < 0 || rois.batch_index[r] >= nb)
      throw std::invalid_argument("roi_align: batch index out of range");
    if (!(b.width() > 0.0) || !(b.height() > 0.0)) continue;
    const double x1 = b.x1 / stride - offset, y1 = b.y1 / stride - offset;
    double rw = b.width() / stride, rh = b.height() / stride;
    if (!params.aligned) {
      rw = std::max(rw, 1.0);
      rh = std::max(rh, 1.0);
    }
    const double bw = rw / s, bh = rh / s;
    const int gy = params.sampling_ratio > 0 ? params.sampling_ratio
                                             : std::max(1, static_cast<int>(std::ceil(bh)));
    const int gx = params.sampling_ratio > 0 ? params.sampling_ratio
                                             : std::max(1, static_cast<int>(std::ceil(bw)));
    const T scale = T(1) / static_cast<T>(gy * gx);
    for (int py = 0; py < s; ++py)
      for (int px = 0; px < s; ++px)
        for (int iy = 0; iy < gy; ++iy) {
          const double y = y1 + py * bh + (iy + 0.5) * bh / gy;
          for (int ix = 0; ix < gx; ++ix) {
            const double x = x1 + px * bw + (ix + 0.5) * bw / gx;
            add_taps<T>(y, x, h, w, py * s + px, scale, taps[r]);
          }
        }
  }

  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t bins = static_cast<std::int64_t>(s) * s;
  nn::Buffer<T> out(static_cast<std::size_t>(n * c * bins), T(0));
  const T* f = features.data();
  for (std::int64_t r = 0; r < n; ++r) {
    const T* base = f + rois.batch_index[r] * c * plane;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* src = base + ch * plane;
      T* dst = out.data() + (r * c + ch) * bins;
      for (const auto& t : taps[r])
        dst[t.bin] += t.w[0] * src[t.idx[0]] + t.w[1] * src[t.idx[1]] +
                      t.w[2] * src[t.idx[2]] + t.w[3] * src[t.idx[3]];
    }
  }

  return Tensor<T>::make_result(
      {n, c, s, s}, std::move(out), {&features}, "roi_align",
      [taps = std::move(taps), batch = rois.batch_index, c, plane, bins](nn::detail::Node<T>& self) {
        T* gf = nn::grad_target(*self.parents[0]);
        if (!gf) return;
        for (std::size_t r = 0; r < taps.size(); ++r) {
          T* base = gf + batch[r] * c * plane;
          for (std::int64_t ch = 0; ch < c; ++ch) {
            T* dst = base + ch * plane;
            const T* g = self.grad.data() + (static_cast<std::int64_t>(r) * c + ch) * bins;
            for (const auto& t : taps[r]) {
              const T v = g[t.bin];
              for (int k = 0; k < 4; ++k) dst[t.idx[k]] += t.w[k] * v;
            }
          }
        }
      });
}

int baseline_level(const Box& box, const LevelRule& rule, int num_levels) {
  const double side = std::sqrt(std::max(box.area(), 0.0));
  const double k = side > 0.0 ? std::floor(rule.k0 + std::log2(side / rule.canonical_size + 1e-12))
                              : -1e9;
  const int kmin = 2, kmax = 2 + num_levels - 1;
  return static_cast<int>(std::clamp(k, double(kmin), double(kmax))) - kmin;
}

template <typename T>
Tensor<T> baseline_extract(const FeaturePyramid<T>& pyramid, const RoiRequest& rois,
                           const RoiAlignParams& params, const LevelRule& rule) {
  const int nl = static_cast<int>(pyramid.levels.size());
  const auto n = static_cast<std::int64_t>(rois.size());
  const int s = params.output_size;
  if (n == 0) return Tensor<T>({0, pyramid.channels, s, s});
  std::vector<RoiRequest> per(nl);
  std::vector<std::vector<int>> origin(nl);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const int l = baseline_level(rois.boxes[r], rule, nl);
    per[l].boxes.push_back(rois.boxes[r]);
    per[l].batch_index.push_back(rois.batch_index[r]);
    origin[l].push_back(static_cast<int>(r));
  }
  std::vector<Tensor<T>> parts;
  std::vector<int> inverse(rois.size());
  int row = 0;
  for (int l = 0; l < nl; ++l) {
    if (per[l].size() == 0) continue;
    parts.push_back(roi_align(pyramid.levels[l], per[l], pyramid.strides[l], params));
    for (int o : origin[l]) inverse[o] = row++;
  }
  const Tensor<T> stacked = parts.size() == 1 ? parts[0] : nn::concat(parts, 0);
  return nn::index_select(stacked, inverse);
}

const char* roi_module_name(RoiModuleKind kind) {
  switch (kind) {
    case RoiModuleKind::kNone: return "none";
    case RoiModuleKind::kConv3: return "conv3";
    case RoiModuleKind::kConv5: return "conv5";
    case RoiModuleKind::kConv7: return "conv7";
    case RoiModuleKind::kConvRect: return "conv7x3_3x7";
    case RoiModuleKind::kNonLocal1: return "nonlocal1";
    case RoiModuleKind::kNonLocal7: return "nonlocal7";
  }
  return "none";
}

RoiModuleKind parse_roi_module(const std::string& name) {
  for (auto k : {RoiModuleKind::kNone, RoiModuleKind::kConv3, RoiModuleKind::kConv5,
                 RoiModuleKind::kConv7, RoiModuleKind::kConvRect, RoiModuleKind::kNonLocal1,
                 RoiModuleKind::kNonLocal7})
    if (name == roi_module_name(k)) return k;
  throw std::invalid_argument("unknown RoI module '" + name + "'");
}

template <typename T>
RoiModule<T>::RoiModule(RoiModuleKind kind, int channels, nn::Rng& rng) : kind_(kind) {
  const auto init = nn::Init::kaiming_fan_out();
  switch (kind) {
    case RoiModuleKind::kNone: break;
    case RoiModuleKind::kConv3: convs_.push_back(nn::Conv2d<T>::same(channels, channels, 3, init, rng)); break;
    case RoiModuleKind::kConv5: convs_.push_back(nn::Conv2d<T>::same(channels, channels, 5, init, rng)); break;
    case RoiModuleKind::kConv7: convs_.push_back(nn::Conv2d<T>::same(channels, channels, 7, init, rng)); break;
    case RoiModuleKind::kConvRect:
      convs_.emplace_back(channels, channels, 7, 3, nn::Conv2dSpec{1, 1, 3, 1}, init, rng);
      convs_.emplace_back(channels, channels, 3, 7, nn::Conv2dSpec{1, 1, 1, 3}, init, rng);
      break;
    case RoiModuleKind::kNonLocal1:
    case RoiModuleKind::kNonLocal7: {
      NonLocalConfig nc;
      nc.kernel = kind == RoiModuleKind::kNonLocal1 ? 1 : 7;
      nonlocal_ = std::make_shared<NonLocalBlock<T>>(channels, nc, rng);
      break;
    }
  }
}

template <typename T>
Tensor<T> RoiModule<T>::operator()(const Tensor<T>& x) const {
  if (nonlocal_) return (*nonlocal_)(x);
  Tensor<T> y = x;
  for (const auto& conv : convs_) y = nn::relu(conv(y));
  return y;
}

template <typename T>
void RoiModule<T>::collect_parameters(const std::string& prefix, nn::NamedTensors<T>& out) const {
  for (std::size_t i = 0; i < convs_.size(); ++i)
    convs_[i].collect_parameters(nn::join_name(prefix, "conv" + std::to_string(i)), out);
  if (nonlocal_) nonlocal_->collect_parameters(nn::join_name(prefix, "nonlocal"), out);
}

template <typename T>
GroieExtractor<T>::GroieExtractor(const GroieConfig& cfg, int channels, int num_levels,
                                  nn::Rng& rng)
    : cfg_(cfg), channels_(channels) {
  const int copies = cfg.per_level_weights ? num_levels : 1;
  for (int i = 0; i < copies; ++i) pre_.emplace_back(cfg.pre, channels, rng);
  post_ = RoiModule<T>(cfg.post, channels, rng);
}

template <typename T>
Tensor<T> GroieExtractor<T>::operator()(const FeaturePyramid<T>& pyramid, const RoiRequest& rois,
                                        const RoiAlignParams& params) const {
  const int s = params.output_size;
  if (rois.size() == 0) return Tensor<T>({0, channels_, s, s});
  if (cfg_.per_level_weights && pyramid.levels.size() != pre_.size())
    throw std::invalid_argument("GroieExtractor: pyramid depth differs from the configured depth");
  std::vector<Tensor<T>> terms;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const auto& pre = pre_[cfg_.per_level_weights ? l : 0];
    terms.push_back(pre(roi_align(pyramid.levels[l], rois, pyramid.strides[l], params)));
  }
  return post_(terms.size() == 1 ? terms[0] : nn::add_n(terms));
}

template <typename T>
void GroieExtractor<T>::collect_parameters(const std::string& prefix,
                                           nn::NamedTensors<T>& out) const {
  for (std::size_t i = 0; i < pre_.size(); ++i)
    pre_[i].collect_parameters(nn::join_name(prefix, "pre" + std::to_string(i)), out);
  post_.collect_parameters(nn::join_name(prefix, "post"), out);
}

#define SBR_INSTANTIATE_ROI(T)                                                                  \
  template Tensor<T> roi_align<T>(const Tensor<T>&, const RoiRequest&, int,                     \
                                  const RoiAlignParams&);                                      \
  template Tensor<T> baseline_extract<T>(const FeaturePyramid<T>&, const RoiRequest&,           \
                                         const RoiAlignParams&, const LevelRule&);              \
  template class RoiModule<T>;                                                                  \
  template class GroieExtractor<T>;

SBR_INSTANTIATE_ROI(float)
SBR_INSTANTIATE_ROI(double)

}  // namespace sbr
