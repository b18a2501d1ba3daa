// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sbr/cli.hpp"

namespace sbr {

using Json = nlohmann::ordered_json;

namespace {

const char* overlap_str(OverlapPolicy p) { return p == OverlapPolicy::kCapped ? "capped" : "crowded"; }

Json proposals_json(const ProposalParams& p) {
  return {{"pre_nms_top_n", p.pre_nms_top_n},
          {"post_nms_top_n", p.post_nms_top_n},
          {"nms_threshold", p.nms_threshold},
          {"min_size", p.min_size},
          {"score_floor", p.score_floor}};
}

Json to_json(const ExperimentConfig& c) {
  const auto& g = c.dataset.train;
  const auto& m = c.model;
  const auto& h = m.head;
  const auto& o = c.optim;
  Json j;
  j["dataset"] = {{"num_images", g.num_images},
                  {"image_size", g.image_size},
                  {"min_instances", g.min_instances},
                  {"max_instances", g.max_instances},
                  {"min_size", g.min_size},
                  {"max_size", g.max_size},
                  {"overlap", overlap_str(g.overlap)},
                  {"max_overlap", g.max_overlap},
                  {"max_retries", g.max_retries},
                  {"seed", g.seed},
                  {"manifest", c.dataset.manifest},
                  {"eval_num_images", c.dataset.eval_num_images},
                  {"eval_seed", c.dataset.eval_seed},
                  {"eval_manifest", c.dataset.eval_manifest}};
  Json model;
  model["seed"] = c.model_seed;
  model["backbone"] = {{"width", m.backbone.width},
                       {"num_stages", m.backbone.num_stages},
                       {"zero_init_last_norm", m.backbone.zero_init_last_norm}};
  model["fpn_channels"] = h.in_channels;
  model["anchors"] = {{"scales", m.anchors.scales}, {"ratios", m.anchors.ratios}};
  model["head"] = {{"det_variant", det_variant_name(h.det_variant)},
                   {"num_classes", h.num_classes},
                   {"fc_dim", h.fc_dim},
                   {"class_agnostic_regression", h.class_agnostic_regression},
                   {"mask_convs", h.mask_convs},
                   {"maskiou", h.maskiou_enabled},
                   {"maskiou_variant", det_variant_name(h.maskiou_variant)},
                   {"nonlocal",
                    {{"kernel", h.nonlocal.kernel},
                     {"reduction", h.nonlocal.reduction},
                     {"theta_phi_only", h.nonlocal.large_kernel_theta_phi_only}}}};
  model["groie"] = {{"enabled", m.use_groie},
                    {"pre", roi_module_name(m.groie.pre)},
                    {"post", roi_module_name(m.groie.post)},
                    {"per_level_weights", m.groie.per_level_weights}};
  model["level_rule"] = {{"k0", m.level_rule.k0}, {"canonical_size", m.level_rule.canonical_size}};
  model["sampling_ratio"] = m.sampling_ratio;
  model["loops"] = {{"train_loops", m.loops.train_loops},
                    {"eval_loops", m.loops.eval_loops},
                    {"thresholds", m.loops.thresholds},
                    {"alpha", m.loops.alpha},
                    {"alternation", m.loops.alternation},
                    {"head_pairs", m.loops.head_pairs},
                    {"mask_iterations_follow_eval", m.loops.mask_iterations_follow_eval}};
  model["rpn"] = {{"positive_iou", m.rpn.positive_iou},
                  {"negative_iou", m.rpn.negative_iou},
                  {"min_best_iou", m.rpn.min_best_iou},
                  {"batch_size", m.rpn.batch_size},
                  {"positive_fraction", m.rpn.positive_fraction},
                  {"smooth_l1_beta", m.rpn.smooth_l1_beta}};
  model["train_proposals"] = proposals_json(m.train_proposals);
  model["test_proposals"] = proposals_json(m.test_proposals);
  model["rois_per_image"] = m.rois_per_image;
  model["positive_fraction"] = m.positive_fraction;
  model["max_mask_rois"] = m.max_mask_rois;
  model["box_norm"] = {m.box_norm.std_x, m.box_norm.std_y, m.box_norm.std_w, m.box_norm.std_h};
  model["box_beta"] = m.box_beta;
  model["add_gt_proposals"] = m.add_gt_proposals;
  model["maskiou_weight"] = m.maskiou_weight;
  model["score_floor"] = m.score_floor;
  model["nms_threshold"] = m.nms_threshold;
  model["max_detections"] = m.max_detections;
  j["model"] = model;
  j["optim"] = {{"epochs", o.epochs},
                {"batch_size", o.batch_size},
                {"base_lr", o.base_lr},
                {"reference_batch", o.reference_batch},
                {"weight_decay", o.weight_decay},
                {"momentum", o.momentum},
                {"decay_epochs", o.decay_epochs},
                {"decay_gamma", o.decay_gamma},
                {"warmup_iters", o.warmup_iters},
                {"max_grad_norm", o.max_grad_norm},
                {"seed", o.seed}};
  j["output_dir"] = c.output_dir;
  return j;
}

// Overlay `in` onto `base`, which holds every valid key.
void merge(Json& base, const Json& in, const std::string& path) {
  if (!in.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (auto it = in.begin(); it != in.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError(key + ": unknown key");
    Json& slot = base[it.key()];
    const Json& v = it.value();
    if (slot.is_object()) {
      merge(slot, v, key);
      continue;
    }
    const bool ok = (slot.is_boolean() && v.is_boolean()) || (slot.is_string() && v.is_string()) ||
                    (slot.is_array() && v.is_array()) ||
                    (slot.is_number_float() && v.is_number()) ||
                    (slot.is_number_integer() && v.is_number_integer() && !(slot.is_number_unsigned() && v < 0));
    if (!ok) throw ConfigError(key + ": wrong type (expected " + std::string(slot.type_name()) + ")");
    slot = v;
  }
}

template <typename V>
V get(const Json& j, const std::string& path) {
  const Json* cur = &j;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) cur = &cur->at(part);
  try {
    return cur->get<V>();
  } catch (const std::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

ProposalParams get_proposals(const Json& j, const std::string& p) {
  return {get<int>(j, p + ".pre_nms_top_n"), get<int>(j, p + ".post_nms_top_n"), get<double>(j, p + ".nms_threshold"),
          get<double>(j, p + ".min_size"), get<double>(j, p + ".score_floor")};
}

template <typename F>
auto named(const std::string& key, F&& parse) {
  try {
    return parse();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

ExperimentConfig from_json(const Json& j) {
  ExperimentConfig c;
  auto& g = c.dataset.train;
  g.num_images = get<int>(j, "dataset.num_images");
  g.image_size = get<int>(j, "dataset.image_size");
  g.min_instances = get<int>(j, "dataset.min_instances");
  g.max_instances = get<int>(j, "dataset.max_instances");
  g.min_size = get<int>(j, "dataset.min_size");
  g.max_size = get<int>(j, "dataset.max_size");
  const auto ov = get<std::string>(j, "dataset.overlap");
  if (ov == "capped") g.overlap = OverlapPolicy::kCapped;
  else if (ov == "crowded") g.overlap = OverlapPolicy::kCrowded;
  else throw ConfigError("dataset.overlap: expected 'capped' or 'crowded', got '" + ov + "'");
  g.max_overlap = get<double>(j, "dataset.max_overlap");
  g.max_retries = get<int>(j, "dataset.max_retries");
  g.seed = get<std::uint64_t>(j, "dataset.seed");
  c.dataset.manifest = get<std::string>(j, "dataset.manifest");
  c.dataset.eval_num_images = get<int>(j, "dataset.eval_num_images");
  c.dataset.eval_seed = get<std::uint64_t>(j, "dataset.eval_seed");
  c.dataset.eval_manifest = get<std::string>(j, "dataset.eval_manifest");

  auto& m = c.model;
  c.model_seed = get<std::uint64_t>(j, "model.seed");
  m.backbone.width = get<int>(j, "model.backbone.width");
  m.backbone.num_stages = get<int>(j, "model.backbone.num_stages");
  m.backbone.zero_init_last_norm = get<bool>(j, "model.backbone.zero_init_last_norm");
  m.anchors.scales = get<std::vector<double>>(j, "model.anchors.scales");
  m.anchors.ratios = get<std::vector<double>>(j, "model.anchors.ratios");
  auto& h = m.head;
  h.in_channels = get<int>(j, "model.fpn_channels");
  h.det_variant = named("model.head.det_variant",
                        [&] { return parse_det_variant(get<std::string>(j, "model.head.det_variant")); });
  h.num_classes = get<int>(j, "model.head.num_classes");
  h.fc_dim = get<int>(j, "model.head.fc_dim");
  h.class_agnostic_regression = get<bool>(j, "model.head.class_agnostic_regression");
  h.mask_convs = get<int>(j, "model.head.mask_convs");
  h.maskiou_enabled = get<bool>(j, "model.head.maskiou");
  h.maskiou_variant = named("model.head.maskiou_variant",
                            [&] { return parse_det_variant(get<std::string>(j, "model.head.maskiou_variant")); });
  h.nonlocal.kernel = get<int>(j, "model.head.nonlocal.kernel");
  h.nonlocal.reduction = get<int>(j, "model.head.nonlocal.reduction");
  h.nonlocal.large_kernel_theta_phi_only = get<bool>(j, "model.head.nonlocal.theta_phi_only");
  m.use_groie = get<bool>(j, "model.groie.enabled");
  m.groie.pre = named("model.groie.pre", [&] { return parse_roi_module(get<std::string>(j, "model.groie.pre")); });
  m.groie.post = named("model.groie.post", [&] { return parse_roi_module(get<std::string>(j, "model.groie.post")); });
  m.groie.per_level_weights = get<bool>(j, "model.groie.per_level_weights");
  m.level_rule.k0 = get<int>(j, "model.level_rule.k0");
  m.level_rule.canonical_size = get<double>(j, "model.level_rule.canonical_size");
  m.sampling_ratio = get<int>(j, "model.sampling_ratio");
  auto& l = m.loops;
  l.train_loops = get<int>(j, "model.loops.train_loops");
  l.eval_loops = get<int>(j, "model.loops.eval_loops");
  l.thresholds = get<std::vector<double>>(j, "model.loops.thresholds");
  l.alpha = get<std::vector<double>>(j, "model.loops.alpha");
  l.alternation = get<std::string>(j, "model.loops.alternation");
  l.head_pairs = get<int>(j, "model.loops.head_pairs");
  l.mask_iterations_follow_eval = get<bool>(j, "model.loops.mask_iterations_follow_eval");
  m.rpn.positive_iou = get<double>(j, "model.rpn.positive_iou");
  m.rpn.negative_iou = get<double>(j, "model.rpn.negative_iou");
  m.rpn.min_best_iou = get<double>(j, "model.rpn.min_best_iou");
  m.rpn.batch_size = get<int>(j, "model.rpn.batch_size");
  m.rpn.positive_fraction = get<double>(j, "model.rpn.positive_fraction");
  m.rpn.smooth_l1_beta = get<double>(j, "model.rpn.smooth_l1_beta");
  m.train_proposals = get_proposals(j, "model.train_proposals");
  m.test_proposals = get_proposals(j, "model.test_proposals");
  m.rois_per_image = get<int>(j, "model.rois_per_image");
  m.positive_fraction = get<double>(j, "model.positive_fraction");
  m.max_mask_rois = get<int>(j, "model.max_mask_rois");
  const auto bn = get<std::vector<double>>(j, "model.box_norm");
  if (bn.size() != 4) throw ConfigError("model.box_norm: expected 4 values");
  m.box_norm = {bn[0], bn[1], bn[2], bn[3]};
  m.box_beta = get<double>(j, "model.box_beta");
  m.add_gt_proposals = get<bool>(j, "model.add_gt_proposals");
  m.maskiou_weight = get<double>(j, "model.maskiou_weight");
  m.score_floor = get<double>(j, "model.score_floor");
  m.nms_threshold = get<double>(j, "model.nms_threshold");
  m.max_detections = get<int>(j, "model.max_detections");

  auto& o = c.optim;
  o.epochs = get<int>(j, "optim.epochs");
  o.batch_size = get<int>(j, "optim.batch_size");
  o.base_lr = get<double>(j, "optim.base_lr");
  o.reference_batch = get<int>(j, "optim.reference_batch");
  o.weight_decay = get<double>(j, "optim.weight_decay");
  o.momentum = get<double>(j, "optim.momentum");
  o.decay_epochs = get<std::vector<int>>(j, "optim.decay_epochs");
  o.decay_gamma = get<double>(j, "optim.decay_gamma");
  o.warmup_iters = get<int>(j, "optim.warmup_iters");
  o.max_grad_norm = get<double>(j, "optim.max_grad_norm");
  o.seed = get<std::uint64_t>(j, "optim.seed");
  c.output_dir = get<std::string>(j, "output_dir");
  return c;
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment + ": overrides take the form section.key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* cur = &doc;
  std::stringstream ss(path);
  std::vector<std::string> parts;
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->contains(parts[i])) (*cur)[parts[i]] = Json::object();
    cur = &(*cur)[parts[i]];
    if (!cur->is_object()) throw ConfigError(path + ": '" + parts[i] + "' is not a section");
  }
  (*cur)[parts.back()] = value;
}

void check(bool ok, const std::string& key, const std::string& why) {
  if (!ok) throw ConfigError(key + ": " + why);
}

}  // namespace

std::string config_to_string(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

ExperimentConfig config_from_string(const std::string& text, const std::vector<std::string>& overrides) {
  Json in = Json::parse(text, nullptr, false, true);
  if (in.is_discarded()) throw ConfigError("config: not valid JSON");
  if (!in.is_object()) throw ConfigError("config: expected an object at top level");
  for (const auto& o : overrides) apply_override(in, o);
  Json full = to_json(ExperimentConfig{});
  merge(full, in, "");
  ExperimentConfig c = from_json(full);
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text = "{}";
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot read " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    text = ss.str();
  }
  return config_from_string(text, overrides);
}

std::vector<int> backbone_strides(const BackboneConfig& cfg) {
  std::vector<int> s;
  for (int i = 0; i < cfg.num_stages; ++i) s.push_back(4 << i);
  return s;
}

void validate_config(const ExperimentConfig& c) {
  const auto& g = c.dataset.train;
  check(g.num_images >= 1, "dataset.num_images", "must be >= 1");
  check(g.image_size >= 64, "dataset.image_size", "must be >= 64");
  check(g.min_instances >= 0 && g.max_instances >= g.min_instances, "dataset.max_instances",
        "must be >= min_instances >= 0");
  check(g.min_size >= 4 && g.max_size >= g.min_size && g.max_size <= g.image_size, "dataset.max_size",
        "need 4 <= min_size <= max_size <= image_size");
  check(g.max_overlap >= 0 && g.max_overlap <= 1, "dataset.max_overlap", "must lie in [0, 1]");
  check(c.dataset.eval_num_images >= 1, "dataset.eval_num_images", "must be >= 1");

  const auto& m = c.model;
  check(m.backbone.width >= 1, "model.backbone.width", "must be >= 1");
  check(m.backbone.num_stages >= 1 && m.backbone.num_stages <= 4, "model.backbone.num_stages", "must be in [1, 4]");
  check(m.head.in_channels >= 4 && m.head.in_channels % 4 == 0, "model.fpn_channels", "must be a positive multiple of 4");
  check(!m.anchors.scales.empty() && !m.anchors.ratios.empty(), "model.anchors", "scales and ratios must be non-empty");
  for (double v : m.anchors.scales) check(v > 0, "model.anchors.scales", "must be positive");
  for (double v : m.anchors.ratios) check(v > 0, "model.anchors.ratios", "must be positive");
  check(m.head.num_classes >= 1, "model.head.num_classes", "must be >= 1");
  check(m.head.num_classes == kNumShapeClasses, "model.head.num_classes",
        "the synthetic data has " + std::to_string(kNumShapeClasses) + " classes");
  check(m.head.fc_dim >= 1, "model.head.fc_dim", "must be >= 1");
  check(m.head.mask_convs >= 1, "model.head.mask_convs", "must be >= 1");
  check(m.head.nonlocal.kernel >= 1 && m.head.nonlocal.kernel % 2 == 1, "model.head.nonlocal.kernel",
        "must be odd and positive");
  check(m.head.nonlocal.reduction >= 1 && m.head.in_channels % m.head.nonlocal.reduction == 0,
        "model.head.nonlocal.reduction", "must divide fpn_channels");
  check(m.level_rule.canonical_size > 0, "model.level_rule.canonical_size", "must be positive");
  check(m.sampling_ratio >= 1, "model.sampling_ratio", "must be >= 1");
  try {
    validate_loop_config(m.loops);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model.") + e.what());
  }
  check(m.rois_per_image >= 1, "model.rois_per_image", "must be >= 1");
  check(m.positive_fraction > 0 && m.positive_fraction <= 1, "model.positive_fraction", "must lie in (0, 1]");
  check(m.max_mask_rois >= 1, "model.max_mask_rois", "must be >= 1");
  check(m.train_proposals.post_nms_top_n >= 1, "model.train_proposals.post_nms_top_n", "must be >= 1");
  check(m.test_proposals.post_nms_top_n >= 1, "model.test_proposals.post_nms_top_n", "must be >= 1");
  check(m.score_floor >= 0 && m.score_floor < 1, "model.score_floor", "must lie in [0, 1)");
  check(m.nms_threshold > 0 && m.nms_threshold <= 1, "model.nms_threshold", "must lie in (0, 1]");
  check(m.max_detections >= 1, "model.max_detections", "must be >= 1");
  check(m.box_beta > 0, "model.box_beta", "must be positive");

  const auto& o = c.optim;
  check(o.epochs >= 1, "optim.epochs", "must be >= 1");
  check(o.batch_size >= 1, "optim.batch_size", "must be >= 1");
  check(o.base_lr > 0, "optim.base_lr", "must be positive");
  check(o.reference_batch >= 1, "optim.reference_batch", "must be >= 1");
  check(o.weight_decay >= 0, "optim.weight_decay", "must be >= 0");
  check(o.momentum >= 0 && o.momentum < 1, "optim.momentum", "must lie in [0, 1)");
  check(o.warmup_iters >= 0, "optim.warmup_iters", "must be >= 0");
  check(o.decay_gamma > 0, "optim.decay_gamma", "must be positive");
  check(!c.output_dir.empty(), "output_dir", "must be set");
}

}  // namespace sbr
