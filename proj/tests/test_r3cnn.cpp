// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "sbr/nn/ops.hpp"
#include "sbr/r3cnn.hpp"
#include "support/gradcheck.hpp"

using namespace sbr;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.backbone = {1, 4, 2, false};
  c.head.in_channels = 8;
  c.head.fc_dim = 16;
  c.head.mask_convs = 1;
  c.rois_per_image = 8;
  c.max_mask_rois = 3;
  c.train_proposals = {40, 6, 0.7, 1e-3, 0.0};
  c.test_proposals = {40, 10, 0.7, 1e-3, 0.0};
  return c;
}

// One 32x32 image with two instances (the generator itself wants >= 64 px).
Sample micro_sample() {
  const ImageSize size{32, 32};
  GrayImage img{32, 32, std::vector<std::uint8_t>(1024, 40)};
  Sample s;
  s.image_id = 1;
  s.size = size;
  const std::tuple<ShapeClass, int, int, int> shapes[] = {{ShapeClass::kSquare, 3, 4, 12}, {ShapeClass::kCircle, 15, 14, 14}};
  for (const auto& [cls, x, y, side] : shapes) {
    Mask m = rasterize_shape(cls, x, y, side, size);
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (m.bits[i]) img.pixels[i] = 200;
    s.gts.push_back({*m.bounding_box(), static_cast<int>(cls)});
    s.masks.push_back(std::move(m));
  }
  for (auto v : img.pixels) s.pixels.push_back((static_cast<float>(v) - 128.f) / 64.f);
  return s;
}

Sample desk_sample(std::uint64_t seed, int image_size = 64) {
  GeneratorParams gp;
  gp.num_images = 1;
  gp.image_size = image_size;
  gp.seed = seed;
  return make_samples(generate_dataset(gp))[0];
}

template <typename T>
void perturb(const nn::NamedTensors<T>& params, std::uint64_t seed, double s) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, s);
  for (const auto& [name, t] : params) {
    auto tt = t;
    for (auto& v : tt.values()) v += static_cast<T>(n(rng));
  }
}

template <typename T>
std::set<std::string> touched(const R3Model<T>& model) {
  std::set<std::string> out;
  for (const auto& [name, t] : model.named_parameters())
    for (T g : t.grad())
      if (g != T(0)) {
        out.insert(name);
        break;
      }
  return out;
}

}  // namespace

TEST_CASE("threshold schedule") {
  CHECK(threshold_schedule(1) == std::vector<double>{0.5});
  CHECK(threshold_schedule(2) == std::vector<double>{0.5, 0.7});
  CHECK(threshold_schedule(3) == std::vector<double>{0.5, 0.6, 0.7});
  CHECK(threshold_schedule(4) == std::vector<double>{0.5, 0.6, 0.7, 0.8});
  const auto five = threshold_schedule(5);
  CHECK(five.back() == 0.9);
  CHECK(five.size() == 5);
  CHECK_THROWS_AS(threshold_schedule(0), std::invalid_argument);
  CHECK_THROWS_AS(threshold_schedule(6), std::invalid_argument);
  CHECK(default_alphas(3) == std::vector<double>{1.0, 0.5, 0.25});
  CHECK(default_alphas(5).back() == 0.0625);
}

TEST_CASE("alternation selects head pairs cyclically") {
  CHECK(alternation_select(1, "abb") == 0);
  CHECK(alternation_select(3, "aab") == 1);
  CHECK(alternation_select(3, "ab") == 0);
  CHECK(alternation_select(4, "aab") == 0);
  CHECK_THROWS_AS(alternation_select(2, ""), std::invalid_argument);
}

TEST_CASE("loop config validation names the offending key") {
  auto message = [](const LoopConfig& c) -> std::string {
    try {
      validate_loop_config(c);
    } catch (const std::invalid_argument& e) {
      return e.what();
    }
    return "";
  };
  LoopConfig ok;
  CHECK(message(ok).empty());
  LoopConfig c = ok;
  c.alternation = "ab";
  CHECK(message(c).rfind("loops.alternation", 0) == 0);  // length != L_t
  c.alternation = "aab";
  CHECK(message(c).find("head_pairs") != std::string::npos);  // 'b' needs H = 2
  c.head_pairs = 2;
  CHECK(message(c).empty());
  c = ok;
  c.thresholds = {0.5, 0.5, 0.7};
  CHECK(message(c).rfind("loops.thresholds", 0) == 0);
  c.thresholds = {0.5, 0.7, 0.95};
  CHECK(message(c).rfind("loops.thresholds", 0) == 0);
  c = ok;
  c.alpha = {1.0, -0.5, 0.25};
  CHECK(message(c).rfind("loops.alpha", 0) == 0);
  c = ok;
  c.train_loops = 6;
  CHECK(message(c).rfind("loops.train_loops", 0) == 0);
  c = ok;
  c.alternation = "aA1";
  CHECK(message(c).rfind("loops.alternation", 0) == 0);
}

TEST_CASE("loss combination and score averaging") {
  const double alpha[] = {1.0, 0.5, 0.25};
  const double sums[] = {2.0, 2.0, 2.0};
  CHECK(combine_losses(alpha, sums) == doctest::Approx(3.5));
  CHECK(combine_losses(alpha, sums, 1.0) == doctest::Approx(4.5));
  const auto avg = average_scores({{{0.2, 0.8}}, {{0.4, 0.6}}});
  CHECK(avg[0][0] == doctest::Approx(0.3));
  CHECK(avg[0][1] == doctest::Approx(0.7));
}

TEST_CASE("train step on random input gives a finite loss and consistent trace") {
  const R3Model<float> model(ModelConfig{}, 3);
  Sample s = desk_sample(4);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0.f, 1.f);
  for (auto& p : s.pixels) p = n(rng);
  const auto r = train_step(model, s, {});
  CHECK(std::isfinite(r.total.item()));
  REQUIRE(r.trace.loops.size() == 3);
  for (const auto& l : r.trace.loops) {
    const auto h = l.histogram();
    CHECK(std::accumulate(h.begin(), h.end(), std::int64_t{0}) == l.positives);
    CHECK(l.positives + l.negatives <= 64);
  }
  // Ground-truth proposals keep every loop populated.
  CHECK(r.trace.loops[0].positives >= static_cast<std::int64_t>(s.gts.size()));
}

TEST_CASE("total loss gradient on a micro instance") {
  ModelConfig cfg = micro_config();
  const R3Model<double> model(cfg, 1);
  const Sample s = micro_sample();
  auto params = model.named_parameters();
  perturb(params, 9, 0.05);
  StepPlan plan;
  StepOptions rec;
  rec.seed = 5;
  rec.record = &plan;
  (void)train_step(model, s, rec);
  REQUIRE(plan.loops.size() == 3);
  for (const auto& l : plan.loops) {
    CHECK(l.sampled.size() <= 8);
    CHECK(!l.sampled.empty());
  }
  StepOptions rep;
  rep.seed = 5;
  rep.replay = &plan;
  // Replaying reproduces the recorded loss exactly.
  const double base = train_step(model, s, rec).total.item();
  CHECK(train_step(model, s, rep).total.item() == base);

  testing::GradCheckOptions opt;
  opt.max_coords_per_input = 2;
  opt.floor = 1e-5;
  const auto report = testing::check_gradients([&] { return train_step(model, s, rep).total; }, params, opt);
  INFO(report.worst_input << " analytic " << report.worst_analytic << " numeric " << report.worst_numeric);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.coords_checked > 60);
}

TEST_CASE("all-background proposals leave only classification and RPN terms") {
  const R3Model<double> model(micro_config(), 2);
  const Sample s = micro_sample();
  // Thin strips along the border overlap no instance at IoU >= 0.5.
  StepPlan plan;
  const std::vector<Box> far{{0, 0, 32, 2}, {0, 30, 32, 32}, {0, 0, 2, 32}, {30, 0, 32, 32}};
  for (int t = 0; t < 3; ++t) plan.loops.push_back({far, {0, 1, 2, 3}});
  StepOptions opt;
  opt.replay = &plan;
  const auto r = train_step(model, s, opt);
  double expected = r.rpn_objectness.item() + r.rpn_box.item();
  const auto alpha = default_alphas(3);
  for (int t = 0; t < 3; ++t) {
    const auto& l = r.loops[static_cast<std::size_t>(t)];
    CHECK(l.box.item() == 0.0);
    CHECK(l.mask.item() == 0.0);
    CHECK(l.cls.item() > 0.0);
    CHECK(r.trace.loops[static_cast<std::size_t>(t)].positives == 0);
    expected += alpha[static_cast<std::size_t>(t)] * l.cls.item();
  }
  CHECK(r.total.item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("raising the threshold only removes positives") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<LabeledBox> gts;
    for (int g = 0; g < 3; ++g) {
      const double x = u(rng) * 40, y = u(rng) * 40, w = 8 + u(rng) * 20;
      gts.push_back({{x, y, x + w, y + w}, 1 + g % 3});
    }
    std::vector<Box> props;
    for (int p = 0; p < 60; ++p) {
      const auto& g = gts[static_cast<std::size_t>(p % 3)].box;
      const double j = 6 * u(rng) - 3, k = 6 * u(rng) - 3;
      props.push_back({g.x1 + j, g.y1 + k, g.x2 + j * u(rng), g.y2 + k * u(rng)});
    }
    const auto thr = threshold_schedule(5);
    for (std::size_t t = 1; t < thr.size(); ++t) {
      const auto lo = assign_labels(props, gts, thr[t - 1]);
      const auto hi = assign_labels(props, gts, thr[t]);
      for (std::size_t i = 0; i < props.size(); ++i)
        if (hi.labels[i] > 0) CHECK(lo.labels[i] == hi.labels[i]);
      CHECK(hi.num_positive() <= lo.num_positive());
    }
  }
}

TEST_CASE("with one head pair every loop trains the same parameters") {
  const R3Model<float> model(micro_config(), 4);
  const Sample s = micro_sample();
  std::vector<std::set<std::string>> sets;
  for (int t = 0; t < 3; ++t) {
    for (const auto& [name, p] : model.named_parameters()) {
      auto pp = p;
      pp.zero_grad();
    }
    StepOptions opt;
    opt.seed = 8;
    opt.skip_rpn = true;
    opt.loop_enabled = {t == 0, t == 1, t == 2};
    train_step(model, s, opt).total.backward();
    sets.push_back(touched(model));
    CHECK(train_step(model, s, opt).loops[static_cast<std::size_t>(t)].pair == 0);
  }
  CHECK(!sets[0].empty());
  // Loop 1 runs the internal mask loop once, where C1 only sees the zero
  // state; its weight starts receiving gradient from loop 2 on.
  auto without_c1 = sets[1];
  without_c1.erase("pair_a.mask.c1.weight");
  CHECK(sets[1].count("pair_a.mask.c1.weight") == 1);
  CHECK(sets[0] == without_c1);
  CHECK(sets[1] == sets[2]);
  bool has_det = false, has_mask = false;
  for (const auto& n : sets[0]) {
    has_det |= n.rfind("pair_a.det", 0) == 0;
    has_mask |= n.rfind("pair_a.mask", 0) == 0;
    CHECK(n.rfind("rpn", 0) != 0);
  }
  CHECK(has_det);
  CHECK(has_mask);
}

TEST_CASE("two head pairs split the loops by the alternation string") {
  ModelConfig cfg = micro_config();
  cfg.loops.head_pairs = 2;
  cfg.loops.alternation = "abb";
  const R3Model<float> model(cfg, 4);
  const Sample s = micro_sample();
  for (int t = 0; t < 3; ++t) {
    for (const auto& [name, p] : model.named_parameters()) {
      auto pp = p;
      pp.zero_grad();
    }
    StepOptions opt;
    opt.skip_rpn = true;
    opt.loop_enabled = {t == 0, t == 1, t == 2};
    train_step(model, s, opt).total.backward();
    const std::string own = t == 0 ? "pair_a." : "pair_b.";
    const std::string other = t == 0 ? "pair_b." : "pair_a.";
    bool own_seen = false;
    for (const auto& n : touched(model)) {
      own_seen |= n.rfind(own, 0) == 0;
      CHECK(n.rfind(other, 0) != 0);
    }
    CHECK(own_seen);
  }
}

TEST_CASE("one evaluation loop is the plain two-stage pipeline") {
  ModelConfig cfg = micro_config();
  cfg.loops.eval_loops = 1;
  cfg.score_floor = 0.0;
  R3Model<double> model(cfg, 6);
  perturb(model.named_parameters(), 3, 0.05);
  const Sample s = micro_sample();
  InferenceTrace trace;
  const auto preds = infer(model, s, &trace);
  REQUIRE(trace.probs.size() == 1);
  CHECK(trace.averaged == trace.probs[0]);

  // Reference: proposals, one head pass, softmax, per-class decode and NMS.
  nn::NoGradGuard ng;
  const auto pyr = model.features(image_tensor<double>(s));
  const auto rpn = model.rpn(pyr);
  const auto boxes = rpn_proposals(rpn.objectness_of(0), rpn.deltas_of(0), model.anchors(s.size), s.size,
                                   cfg.test_proposals)
                         .boxes;
  REQUIRE(!boxes.empty());
  const auto out = model.pairs[0].det(model.extract_det(pyr, {boxes, std::vector<int>(boxes.size(), 0)}));
  const auto probs = nn::softmax(out.class_logits);
  std::vector<std::pair<int, Box>> expected;
  std::vector<double> expected_scores;
  const int k = cfg.head.num_classes;
  for (int c = 1; c <= k; ++c) {
    std::vector<Box> cand;
    std::vector<double> sc;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const double* d = out.deltas.data() + (i * static_cast<std::size_t>(k) + static_cast<std::size_t>(c - 1)) * 4;
      const Box b = clip_box(decode_deltas(boxes[i], {d[0], d[1], d[2], d[3]}, cfg.box_norm), s.size);
      if (!(b.width() > 1e-3 && b.height() > 1e-3)) continue;
      cand.push_back(b);
      sc.push_back(probs.at({static_cast<std::int64_t>(i), c}));
    }
    for (int keep : nms(cand, sc, cfg.nms_threshold)) {
      expected.emplace_back(c, cand[static_cast<std::size_t>(keep)]);
      expected_scores.push_back(sc[static_cast<std::size_t>(keep)]);
    }
  }
  REQUIRE(preds.size() == std::min<std::size_t>(expected.size(), static_cast<std::size_t>(cfg.max_detections)));
  for (const auto& p : preds) {
    bool found = false;
    for (std::size_t i = 0; i < expected.size(); ++i)
      found |= expected[i].first == p.category_id && expected[i].second == p.box && expected_scores[i] == p.score;
    CHECK(found);
  }
}

TEST_CASE("more evaluation loops change the predictions") {
  ModelConfig cfg = micro_config();
  cfg.score_floor = 0.0;
  R3Model<double> model(cfg, 6);
  perturb(model.named_parameters(), 3, 0.05);
  const Sample s = micro_sample();
  cfg.loops.eval_loops = 1;
  R3Model<double> one = model;
  auto run = [&](int le) {
    ModelConfig c = cfg;
    c.loops.eval_loops = le;
    R3Model<double> m(c, 6);
    auto src = model.named_parameters();
    auto dst = m.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) std::copy(src[i].second.values().begin(), src[i].second.values().end(),
                                                           dst[i].second.values().begin());
    InferenceTrace tr;
    auto preds = infer(m, s, &tr);
    return std::make_pair(preds, tr);
  };
  const auto [p1, t1] = run(1);
  const auto [p3, t3] = run(3);
  REQUIRE(t3.probs.size() == 3);
  CHECK(t3.boxes[1] != t3.boxes[0]);  // loop 2 sees refined boxes
  bool differs = p1.size() != p3.size();
  for (std::size_t i = 0; !differs && i < p1.size(); ++i) differs = p1[i].score != p3[i].score || !(p1[i].box == p3[i].box);
  CHECK(differs);
}

TEST_CASE("mask target and paste are inverse up to resampling") {
  Mask m = rasterize_shape(ShapeClass::kCircle, 10, 12, 20, {48, 48});
  const Box box = *m.bounding_box();
  const auto target = mask_target(m, box, 28);
  REQUIRE(target.size() == 784);
  for (float v : target) CHECK((v == 0.f || v == 1.f));
  CHECK(target[14 * 28 + 14] == 1.f);
  CHECK(target[0] == 0.f);
  const Mask back = paste_mask(target, 28, box, {48, 48});
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < m.bits.size(); ++i) {
    inter += m.bits[i] && back.bits[i];
    uni += m.bits[i] || back.bits[i];
  }
  CHECK(static_cast<double>(inter) / static_cast<double>(uni) > 0.9);
  // A box-aligned rectangle survives exactly.
  Mask rect(32, 32);
  for (int y = 4; y < 18; ++y)
    for (int x = 6; x < 27; ++x) rect.at(x, y) = 1;
  const auto t2 = mask_target(rect, *rect.bounding_box(), 28);
  for (float v : t2) CHECK(v == 1.f);
  CHECK(paste_mask(t2, 28, *rect.bounding_box(), {32, 32}) == rect);
}

TEST_CASE("one-image overfit") {
  const ModelConfig cfg;
  R3Model<float> model(cfg, 0);
  const Sample s = desk_sample(11);
  nn::Sgd<float> sgd(model.named_parameters(), {0.9, 0.0, 10.0});
  double first = 0.0, tail = 0.0;
  for (int step = 0; step < 200; ++step) {
    sgd.zero_grad();
    StepOptions opt;
    opt.seed = static_cast<std::uint64_t>(step);
    auto r = train_step(model, s, opt);
    r.total.backward();
    const double loss = r.total.item();
    REQUIRE(std::isfinite(loss));
    if (step == 0) first = loss;
    if (step >= 195) tail += loss / 5.0;
    sgd.step(step < 20 ? 0.01 * (step + 1) / 20.0 : 0.01);
  }
  INFO("first " << first << " last-5 mean " << tail);
  CHECK(tail * 10.0 <= first);
}

TEST_CASE("checkpoint round trip and version check") {
  const auto dir = std::filesystem::temp_directory_path() / "sbr_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  const R3Model<float> a(micro_config(), 1);
  save_checkpoint(path, a, "{\"k\": 1}");
  R3Model<float> b(micro_config(), 2);
  CHECK(load_checkpoint(path, b) == "{\"k\": 1}");
  CHECK(read_checkpoint_config(path) == "{\"k\": 1}");
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto va = pa[i].second.values(), vb = pb[i].second.values();
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
  }

  // Bump the version field after the 8-byte magic.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint32_t v = kCheckpointVersion + 1;
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  CHECK_THROWS_AS(load_checkpoint(path, b), CheckpointError);
  // A model with a different shape is refused.
  save_checkpoint(path, a, "");
  ModelConfig other = micro_config();
  other.head.mask_convs = 2;
  R3Model<float> c(other, 1);
  CHECK_THROWS_AS(load_checkpoint(path, c), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt", c), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("loop trace statistics and serialization") {
  LoopTrace tr;
  tr.loops.resize(2);
  for (double v : {0.52, 0.61, 0.63, 0.95}) tr.loops[0].add_positive(v);
  tr.loops[0].negatives = 7;
  tr.loops[0].steps = 1;
  tr.loops[0].cls_loss = 0.25;
  tr.loops[1].add_positive(1.0);
  const auto h = tr.loops[0].histogram();
  CHECK(h[0] == 1);
  CHECK(h[2] == 2);
  CHECK(h[9] == 1);
  CHECK(tr.loops[1].histogram()[9] == 1);  // 1.0 falls in the last bin
  CHECK(tr.loops[0].median() == doctest::Approx(0.62));
  CHECK(tr.loops[0].mass_above(0.7) == doctest::Approx(0.25));
  CHECK(std::isnan(LoopStats{}.median()));

  const auto back = LoopTrace::from_json(tr.to_json());
  REQUIRE(back.loops.size() == 2);
  CHECK(back.loops[0].fine == tr.loops[0].fine);
  CHECK(back.loops[0].negatives == 7);
  CHECK(back.loops[0].cls_loss == 0.25);
  CHECK(back.loops[0].iou_sum == doctest::Approx(tr.loops[0].iou_sum));
  CHECK(back.to_json() == tr.to_json());

  LoopTrace merged = tr;
  merged.merge(tr);
  CHECK(merged.loops[0].positives == 8);
  CHECK(merged.loops[0].median() == doctest::Approx(tr.loops[0].median()));
  CHECK_THROWS_AS(LoopTrace::from_json("{\"loops\": [{}]}"), std::invalid_argument);
}
