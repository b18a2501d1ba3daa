// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbr/geometry.hpp"

namespace sbr {

enum class ShapeClass { kCircle = 1, kSquare = 2, kTriangle = 3 };
inline constexpr int kNumShapeClasses = 3;
const char* shape_name(ShapeClass c);

/// Binary mask at image resolution, row-major.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}
  std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int x, int y) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::int64_t area() const;
  /// Pixel bounding box (max edges exclusive); nullopt for an empty mask.
  std::optional<Box> bounding_box() const;

  friend bool operator==(const Mask&, const Mask&) = default;
};

/// Uncompressed run-length encoding over the row-major pixel order.
/// Runs alternate starting with zeros; the first run may be empty.
struct Rle {
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> counts;

  friend bool operator==(const Rle&, const Rle&) = default;
};

Rle encode_rle(const Mask& mask);
/// Throws std::invalid_argument when runs do not cover the image exactly.
Mask decode_rle(const Rle& rle);

/// Pixel-center rasterization of a shape inscribed in an integer square
/// footprint [x, x+side) x [y, y+side).
Mask rasterize_shape(ShapeClass cls, int x, int y, int side, ImageSize image);

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

void write_pgm(const GrayImage& image, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

enum class OverlapPolicy { kCapped, kCrowded };

struct GeneratorParams {
  int num_images = 200;
  int image_size = 64;
  int min_instances = 1;
  int max_instances = 4;
  int min_size = 10;
  int max_size = 40;
  OverlapPolicy overlap = OverlapPolicy::kCapped;
  /// Pairwise box IoU cap under kCapped.
  double max_overlap = 0.3;
  int max_retries = 100;
  std::uint64_t seed = 0;

  friend bool operator==(const GeneratorParams&, const GeneratorParams&) = default;
};

struct ImageRecord {
  int id = 0;
  int width = 0;
  int height = 0;
  std::string file_name;
  int requested_instances = 0;
  int placed_instances = 0;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct InstanceAnnotation {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  Box box;
  std::int64_t area = 0;
  Rle segmentation;

  friend bool operator==(const InstanceAnnotation&, const InstanceAnnotation&) = default;
};

struct Category {
  int id = 0;
  std::string name;

  friend bool operator==(const Category&, const Category&) = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> images;
  std::vector<InstanceAnnotation> annotations;
  std::vector<Category> categories;
  std::optional<GeneratorParams> generator;

  const ImageRecord* find_image(int id) const;
  /// Annotations of one image, in file order.
  std::vector<const InstanceAnnotation*> annotations_for(int image_id) const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

std::vector<Category> shape_categories();

struct GeneratedDataset {
  DatasetManifest manifest;
  std::vector<GrayImage> images;  // parallel to manifest.images
};

/// Throws std::invalid_argument on infeasible parameters.
GeneratedDataset generate_dataset(const GeneratorParams& params);

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string manifest_to_string(const DatasetManifest& manifest);
DatasetManifest manifest_from_string(const std::string& text);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Writes `images/<file_name>` and `annotations.json` under `dir`.
void write_dataset(const GeneratedDataset& data, const std::filesystem::path& dir);
/// Reads a manifest and every image it references (paths relative to the
/// manifest's directory).
GeneratedDataset read_dataset(const std::filesystem::path& manifest_path);

}  // namespace sbr
