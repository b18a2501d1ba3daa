// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include "sbr/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sbr {

const char* shape_name(ShapeClass c) {
  switch (c) {
    case ShapeClass::kCircle: return "circle";
    case ShapeClass::kSquare: return "square";
    case ShapeClass::kTriangle: return "triangle";
  }
  return "unknown";
}

std::vector<Category> shape_categories() {
  std::vector<Category> out;
  for (int c = 1; c <= kNumShapeClasses; ++c)
    out.push_back({c, shape_name(static_cast<ShapeClass>(c))});
  return out;
}

std::int64_t Mask::area() const {
  std::int64_t n = 0;
  for (auto b : bits) n += b != 0;
  return n;
}

std::optional<Box> Mask::bounding_box() const {
  int x1 = width, y1 = height, x2 = -1, y2 = -1;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (at(x, y)) {
        x1 = std::min(x1, x);
        y1 = std::min(y1, y);
        x2 = std::max(x2, x);
        y2 = std::max(y2, y);
      }
  if (x2 < 0) return std::nullopt;
  return Box{double(x1), double(y1), double(x2 + 1), double(y2 + 1)};
}

Rle encode_rle(const Mask& mask) {
  Rle rle{mask.width, mask.height, {}};
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (auto b : mask.bits) {
    const std::uint8_t v = b != 0;
    if (v != current) {
      rle.counts.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
  }
  rle.counts.push_back(run);
  return rle;
}

Mask decode_rle(const Rle& rle) {
  if (rle.width < 0 || rle.height < 0) throw std::invalid_argument("decode_rle: negative size");
  Mask mask(rle.width, rle.height);
  std::size_t pos = 0;
  std::uint8_t v = 0;
  for (auto run : rle.counts) {
    if (pos + run > mask.bits.size())
      throw std::invalid_argument("decode_rle: runs exceed the mask size");
    std::fill_n(mask.bits.begin() + static_cast<std::ptrdiff_t>(pos), run, v);
    pos += run;
    v ^= 1;
  }
  if (pos != mask.bits.size()) throw std::invalid_argument("decode_rle: runs do not cover the mask");
  return mask;
}

Mask rasterize_shape(ShapeClass cls, int x0, int y0, int side, ImageSize image) {
  Mask m(image.width, image.height);
  const double s = side;
  const double cx = x0 + 0.5 * s;
  const double cy = y0 + 0.5 * s;
  const double r = 0.5 * s;
  const int xa = std::max(0, x0), xb = std::min(image.width, x0 + side);
  const int ya = std::max(0, y0), yb = std::min(image.height, y0 + side);
  for (int y = ya; y < yb; ++y) {
    const double py = y + 0.5;
    for (int x = xa; x < xb; ++x) {
      const double px = x + 0.5;
      bool in = false;
      switch (cls) {
        case ShapeClass::kSquare: in = true; break;
        case ShapeClass::kCircle: in = (px - cx) * (px - cx) + (py - cy) * (py - cy) < r * r; break;
        case ShapeClass::kTriangle:
          // Apex at the top-center, base along the bottom edge.
          in = std::abs(px - cx) <= 0.5 * (py - y0);
          break;
      }
      if (in) m.at(x, y) = 1;
    }
  }
  return m;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

struct Placed {
  ShapeClass cls;
  Mask full;
  Box box;
  std::int64_t full_area;
  std::uint8_t intensity;
};

// Visible part of instance k once every later instance is painted over it.
Mask visible(const std::vector<Placed>& placed, std::size_t k, const Mask* extra) {
  Mask v = placed[k].full;
  for (std::size_t i = 0; i < v.bits.size(); ++i) {
    if (!v.bits[i]) continue;
    for (std::size_t j = k + 1; j < placed.size(); ++j)
      if (placed[j].full.bits[i]) { v.bits[i] = 0; break; }
    if (extra && extra->bits[i]) v.bits[i] = 0;
  }
  return v;
}

void render_image(const GeneratorParams& p, int index, ImageRecord& rec, GrayImage& img,
                  std::vector<InstanceAnnotation>& anns, int& next_ann_id) {
  std::mt19937_64 rng(splitmix64(p.seed ^ splitmix64(static_cast<std::uint64_t>(index))));
  const ImageSize size{p.image_size, p.image_size};
  const int requested = std::uniform_int_distribution<int>(p.min_instances, p.max_instances)(rng);
  const auto bg = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(10, 70)(rng));

  std::vector<Placed> placed;
  for (int k = 0; k < requested; ++k) {
    const auto cls = static_cast<ShapeClass>(std::uniform_int_distribution<int>(1, 3)(rng));
    const auto intensity = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(140, 250)(rng));
    for (int attempt = 0; attempt < p.max_retries; ++attempt) {
      const int side = std::uniform_int_distribution<int>(p.min_size, p.max_size)(rng);
      const int x = std::uniform_int_distribution<int>(0, p.image_size - side)(rng);
      const int y = std::uniform_int_distribution<int>(0, p.image_size - side)(rng);
      Mask m = rasterize_shape(cls, x, y, side, size);
      const auto box = m.bounding_box();
      if (!box) continue;
      bool ok = true;
      if (p.overlap == OverlapPolicy::kCapped)
        for (const auto& q : placed)
          if (iou(*box, q.box) > p.max_overlap) { ok = false; break; }
      // Occluded instances must keep at least half of their pixels.
      for (std::size_t j = 0; ok && j < placed.size(); ++j)
        if (2 * visible(placed, j, &m).area() < placed[j].full_area) ok = false;
      if (!ok) continue;
      const std::int64_t area = m.area();
      placed.push_back({cls, std::move(m), *box, area, intensity});
      break;
    }
  }

  img.width = img.height = p.image_size;
  img.pixels.assign(static_cast<std::size_t>(p.image_size) * p.image_size, bg);
  std::normal_distribution<double> noise(0.0, 4.0);
  for (const auto& q : placed)
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      if (q.full.bits[i]) img.pixels[i] = q.intensity;
  for (auto& px : img.pixels)
    px = static_cast<std::uint8_t>(std::clamp(std::lround(px + noise(rng)), 0L, 255L));

  rec.id = index;
  rec.width = rec.height = p.image_size;
  char name[32];
  std::snprintf(name, sizeof(name), "images/%06d.pgm", index);
  rec.file_name = name;
  rec.requested_instances = requested;
  rec.placed_instances = static_cast<int>(placed.size());
  for (std::size_t k = 0; k < placed.size(); ++k) {
    const Mask v = visible(placed, k, nullptr);
    InstanceAnnotation a;
    a.id = next_ann_id++;
    a.image_id = index;
    a.category_id = static_cast<int>(placed[k].cls);
    a.box = *v.bounding_box();
    a.area = v.area();
    a.segmentation = encode_rle(v);
    anns.push_back(std::move(a));
  }
}

}  // namespace

GeneratedDataset generate_dataset(const GeneratorParams& p) {
  if (p.num_images < 0) throw std::invalid_argument("generate_dataset: num_images must be >= 0");
  if (p.image_size < 64) throw std::invalid_argument("generate_dataset: image_size must be >= 64");
  if (p.min_instances < 0 || p.max_instances < p.min_instances)
    throw std::invalid_argument("generate_dataset: invalid instance range");
  if (p.min_size < 2 || p.max_size < p.min_size || p.max_size > p.image_size)
    throw std::invalid_argument("generate_dataset: size range must lie within the image");
  if (p.max_retries < 1) throw std::invalid_argument("generate_dataset: max_retries must be >= 1");

  GeneratedDataset out;
  out.manifest.categories = shape_categories();
  out.manifest.generator = p;
  out.manifest.images.resize(static_cast<std::size_t>(p.num_images));
  out.images.resize(static_cast<std::size_t>(p.num_images));
  int next_ann_id = 1;
  for (int i = 0; i < p.num_images; ++i)
    render_image(p, i, out.manifest.images[i], out.images[i], out.manifest.annotations,
                 next_ann_id);
  return out;
}

const ImageRecord* DatasetManifest::find_image(int id) const {
  for (const auto& im : images)
    if (im.id == id) return &im;
  return nullptr;
}

std::vector<const InstanceAnnotation*> DatasetManifest::annotations_for(int image_id) const {
  std::vector<const InstanceAnnotation*> out;
  for (const auto& a : annotations)
    if (a.image_id == image_id) out.push_back(&a);
  return out;
}

}  // namespace sbr
