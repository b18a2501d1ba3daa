// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sbr/synthdata.hpp"

namespace sbr {

using Json = nlohmann::ordered_json;

void write_pgm(const GrayImage& image, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P5\n" << image.width << " " << image.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(image.pixels.data()),
          static_cast<std::streamsize>(image.pixels.size()));
  if (!f) throw std::runtime_error("short write to " + path.string());
}

namespace {

// Next whitespace-separated header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
    } else {
      tok.push_back(c);
    }
  }
  return tok;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  if (pgm_token(f) != "P5") throw std::runtime_error(path.string() + ": not a binary PGM");
  GrayImage img;
  try {
    img.width = std::stoi(pgm_token(f));
    img.height = std::stoi(pgm_token(f));
    if (std::stoi(pgm_token(f)) != 255)
      throw std::runtime_error(path.string() + ": only 8-bit PGM is supported");
  } catch (const std::logic_error&) {
    throw std::runtime_error(path.string() + ": malformed PGM header");
  }
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  f.read(reinterpret_cast<char*>(img.pixels.data()),
         static_cast<std::streamsize>(img.pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw std::runtime_error(path.string() + ": truncated pixel data");
  return img;
}

namespace {

const char* overlap_name(OverlapPolicy p) {
  return p == OverlapPolicy::kCapped ? "capped" : "crowded";
}

Json generator_to_json(const GeneratorParams& p) {
  return Json{{"num_images", p.num_images},       {"image_size", p.image_size},
              {"min_instances", p.min_instances}, {"max_instances", p.max_instances},
              {"min_size", p.min_size},           {"max_size", p.max_size},
              {"overlap", overlap_name(p.overlap)}, {"max_overlap", p.max_overlap},
              {"max_retries", p.max_retries},     {"seed", p.seed}};
}

template <typename T>
T field(const Json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw ManifestError(where + ": expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw ManifestError(where + ": missing key '" + key + "'");
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ManifestError(where + ": key '" + key + "' has the wrong type");
  }
}

const Json& array_field(const Json& root, const char* key) {
  auto it = root.find(key);
  if (it == root.end() || !it->is_array())
    throw ManifestError(std::string("manifest: missing array '") + key + "'");
  return *it;
}

GeneratorParams generator_from_json(const Json& j) {
  const std::string w = "info.generator";
  GeneratorParams p;
  p.num_images = field<int>(j, "num_images", w);
  p.image_size = field<int>(j, "image_size", w);
  p.min_instances = field<int>(j, "min_instances", w);
  p.max_instances = field<int>(j, "max_instances", w);
  p.min_size = field<int>(j, "min_size", w);
  p.max_size = field<int>(j, "max_size", w);
  const auto ov = field<std::string>(j, "overlap", w);
  if (ov == "capped") p.overlap = OverlapPolicy::kCapped;
  else if (ov == "crowded") p.overlap = OverlapPolicy::kCrowded;
  else throw ManifestError(w + ": unknown overlap policy '" + ov + "'");
  p.max_overlap = field<double>(j, "max_overlap", w);
  p.max_retries = field<int>(j, "max_retries", w);
  p.seed = field<std::uint64_t>(j, "seed", w);
  return p;
}

}  // namespace

std::string manifest_to_string(const DatasetManifest& m) {
  Json root = Json::object();
  if (m.generator) root["info"] = Json{{"generator", generator_to_json(*m.generator)}};
  Json images = Json::array();
  for (const auto& im : m.images)
    images.push_back({{"id", im.id},
                      {"width", im.width},
                      {"height", im.height},
                      {"file_name", im.file_name},
                      {"requested_instances", im.requested_instances},
                      {"placed_instances", im.placed_instances}});
  Json anns = Json::array();
  for (const auto& a : m.annotations)
    anns.push_back({{"id", a.id},
                    {"image_id", a.image_id},
                    {"category_id", a.category_id},
                    {"bbox", {a.box.x1, a.box.y1, a.box.width(), a.box.height()}},
                    {"area", a.area},
                    {"segmentation",
                     {{"size", {a.segmentation.height, a.segmentation.width}},
                      {"counts", a.segmentation.counts}}},
                    {"iscrowd", 0}});
  Json cats = Json::array();
  for (const auto& c : m.categories) cats.push_back({{"id", c.id}, {"name", c.name}});
  root["images"] = std::move(images);
  root["annotations"] = std::move(anns);
  root["categories"] = std::move(cats);
  return root.dump(1) + "\n";
}

DatasetManifest manifest_from_string(const std::string& text) {
  Json root;
  try {
    root = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ManifestError(std::string("manifest: invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ManifestError("manifest: top level must be an object");

  DatasetManifest m;
  if (auto it = root.find("info"); it != root.end() && it->contains("generator"))
    m.generator = generator_from_json((*it)["generator"]);

  const Json& images = array_field(root, "images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string w = "images[" + std::to_string(i) + "]";
    ImageRecord r;
    r.id = field<int>(images[i], "id", w);
    r.width = field<int>(images[i], "width", w);
    r.height = field<int>(images[i], "height", w);
    r.file_name = field<std::string>(images[i], "file_name", w);
    r.requested_instances = images[i].value("requested_instances", 0);
    r.placed_instances = images[i].value("placed_instances", 0);
    if (r.width <= 0 || r.height <= 0) throw ManifestError(w + ": non-positive image size");
    if (m.find_image(r.id)) throw ManifestError(w + ": duplicate image id");
    m.images.push_back(std::move(r));
  }

  const Json& cats = array_field(root, "categories");
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::string w = "categories[" + std::to_string(i) + "]";
    m.categories.push_back({field<int>(cats[i], "id", w), field<std::string>(cats[i], "name", w)});
  }

  const Json& anns = array_field(root, "annotations");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string w = "annotations[" + std::to_string(i) + "]";
    const Json& j = anns[i];
    InstanceAnnotation a;
    a.id = field<int>(j, "id", w);
    a.image_id = field<int>(j, "image_id", w);
    a.category_id = field<int>(j, "category_id", w);
    const auto bbox = field<std::vector<double>>(j, "bbox", w);
    if (bbox.size() != 4) throw ManifestError(w + ": bbox must have 4 numbers");
    if (bbox[2] < 0 || bbox[3] < 0) throw ManifestError(w + ": negative bbox extent");
    a.box = {bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]};
    a.area = field<std::int64_t>(j, "area", w);
    const Json seg = field<Json>(j, "segmentation", w);
    const auto size = field<std::vector<int>>(seg, "size", w + ".segmentation");
    if (size.size() != 2) throw ManifestError(w + ".segmentation: size must be [h, w]");
    a.segmentation.height = size[0];
    a.segmentation.width = size[1];
    a.segmentation.counts = field<std::vector<std::uint32_t>>(seg, "counts", w + ".segmentation");
    const ImageRecord* im = m.find_image(a.image_id);
    if (!im) throw ManifestError(w + ": references unknown image id " + std::to_string(a.image_id));
    if (a.segmentation.height != im->height || a.segmentation.width != im->width)
      throw ManifestError(w + ": segmentation size differs from its image");
    std::uint64_t covered = 0;
    for (auto c : a.segmentation.counts) covered += c;
    if (covered != static_cast<std::uint64_t>(im->width) * im->height)
      throw ManifestError(w + ": segmentation runs do not cover the image");
    m.annotations.push_back(std::move(a));
  }
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << manifest_to_string(manifest);
  if (!f) throw std::runtime_error("short write to " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return manifest_from_string(ss.str());
  } catch (const ManifestError& e) {
    throw ManifestError(path.string() + ": " + e.what());
  }
}

void write_dataset(const GeneratedDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < data.images.size(); ++i)
    write_pgm(data.images[i], dir / data.manifest.images[i].file_name);
  write_manifest(data.manifest, dir / "annotations.json");
}

GeneratedDataset read_dataset(const std::filesystem::path& manifest_path) {
  GeneratedDataset out;
  out.manifest = read_manifest(manifest_path);
  const auto root = manifest_path.parent_path();
  for (const auto& im : out.manifest.images) {
    GrayImage g = read_pgm(root / im.file_name);
    if (g.width != im.width || g.height != im.height)
      throw ManifestError(im.file_name + ": image size differs from the manifest");
    out.images.push_back(std::move(g));
  }
  return out;
}

}  // namespace sbr
