// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <cmath>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "sbr/heads.hpp"
#include "sbr/nn/ops.hpp"
#include "support/gradcheck.hpp"

using sbr::DetVariant;
using sbr::HeadConfig;
using sbr::nn::Shape;
using sbr::nn::Tensor;
namespace nn = sbr::nn;
using D = Tensor<double>;

namespace {

D randn(Shape shape, std::uint64_t seed, double s = 1.0) {
  D t(std::move(shape), 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, s);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

void perturb(const nn::NamedTensors<double>& params, std::uint64_t seed, double s) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, s);
  for (const auto& [name, t] : params) {
    auto tt = t;
    for (auto& v : tt.values()) v += n(rng);
  }
}

HeadConfig small(DetVariant v, int k = 2) {
  HeadConfig cfg;
  cfg.det_variant = v;
  cfg.maskiou_variant = v;
  cfg.num_classes = k;
  cfg.in_channels = 8;
  cfg.fc_dim = 16;
  cfg.mask_convs = 2;
  cfg.nonlocal.kernel = 3;
  return cfg;
}

}  // namespace

TEST_CASE("layer comparison rows are exact") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto table = sbr::layer_comparison_table();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::pair<const char*, std::int64_t> expected[] = {
      {"FC 1", 12846080},        {"L2C (conv1)", 1605760}, {"L2C (conv1a)", 1376512},
      {"L2C (conv1b)", 688256},  {"FC 2", 1049600},        {"L2C (conv2)", 401472},
      {"L2C (conv2a)", 344192},  {"L2C (conv2b)", 172096},
  };
  REQUIRE(table.rows.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(table.rows[i].name == expected[i].first);
    CHECK(table.rows[i].count == expected[i].second);
  }
  CHECK(table.rows[0].description == "12544x1024 (W) + 1024 (b)");
  CHECK(table.rows[1].description == "256x7x7x128 (W) + 128 (b)");
  CHECK(table.rows[2].description == "256x7x3x256 (W) + 256 (b)");
  CHECK(secs < 1.0);

  const auto text = table.to_text();
  CHECK(text.find("12,846,080") != std::string::npos);
  CHECK(text.find("L2C (conv2b)") != std::string::npos);
  const auto j = nlohmann::json::parse(table.to_json());
  CHECK(j["rows"][3]["params"] == 688256);
  CHECK(j["total"] == table.total());
}

TEST_CASE("variant totals") {
  const auto t = sbr::variant_totals_table(80);
  auto get = [&](const std::string& n) {
    const auto* r = t.find(n);
    REQUIRE(r != nullptr);
    return r->count;
  };
  CHECK(get("trunk fc_baseline") == 12846080 + 1049600);
  CHECK(get("trunk l2c_7x7") == 1605760 + 401472);
  CHECK(get("trunk l2c_rect") == 1376512 + 688256 + 344192 + 172096);
  // cls: flat x 81 + 81, reg: flat x 4 + 4.
  CHECK(get("detector fc_baseline") == 13982805);
  CHECK(get("detector l2c_7x7") == 2273877);
  CHECK(get("detector l2c_rect") == 2847701);
  CHECK(get("detector l2c_7x7+nl_b") == 2273877 + 6423168);
  CHECK(get("detector l2c_rect+nl_b") == 2847701 + 6423168);
  CHECK(get("maskiou fc_baseline") == 16340304);
  CHECK(get("maskiou l2c_7x7") == 4620816);
  CHECK(get("maskiou l2c_rect") == 5194640);
}

TEST_CASE("count_params groups by layer") {
  nn::Rng rng(0);
  HeadConfig cfg = small(DetVariant::kL2c7x7);
  const sbr::DetectionHead<double> head(cfg, rng);
  const auto t = sbr::count_params(head);
  CHECK(t.total() == head.num_parameters());
  REQUIRE(t.find("trunk.conv1") != nullptr);
  CHECK(t.find("trunk.conv1")->count == 8 * 4 * 49 + 4);
  const auto named = sbr::count_params(head.layers());
  CHECK(named.total() == head.num_parameters());
  CHECK(named.rows.front().name == "L2C (conv1)");
}

TEST_CASE("variant names round trip") {
  for (const char* n : {"fc_baseline", "l2c_7x7", "l2c_rect", "l2c_7x7+nl_b", "l2c_rect+nl_b", "l2c_7x7+nl_a",
                        "l2c_7x7+nl_b+nl_a"})
    CHECK(std::string(sbr::det_variant_name(sbr::parse_det_variant(n))) == n);
  CHECK_THROWS(sbr::parse_det_variant("l2c_9x9"));
}

TEST_CASE("detection head output shapes") {
  nn::Rng rng(1);
  for (DetVariant v : {DetVariant::kFcBaseline, DetVariant::kL2c7x7, DetVariant::kL2cRect, DetVariant::kL2c7x7NlB,
                       DetVariant::kL2cRectNlB, DetVariant::kL2c7x7NlA, DetVariant::kL2c7x7NlBNlA}) {
    const sbr::DetectionHead<double> head(small(v, 3), rng);
    const auto out = head(randn({5, 8, 7, 7}, 2));
    CHECK(out.class_logits.shape() == Shape{5, 4});
    CHECK(out.deltas.shape() == Shape{5, 3, 4});
    const auto none = head(D({0, 8, 7, 7}, 0.0));
    CHECK(none.class_logits.shape() == Shape{0, 4});
    CHECK_THROWS(head(randn({2, 8, 14, 14}, 3)));
  }
}

TEST_CASE("detection loss gradient on a micro instance") {
  nn::Rng rng(2);
  for (DetVariant v : {DetVariant::kFcBaseline, DetVariant::kL2c7x7, DetVariant::kL2cRect}) {
    const sbr::DetectionHead<double> head(small(v, 2), rng);
    D x = randn({2, 8, 7, 7}, 4);
    x.set_requires_grad(true);
    const int labels[] = {2, 0};
    const sbr::BoxDeltas targets[] = {{0.1, -0.2, 0.3, 0.05}, {}};
    auto params = head.named_parameters("head");
    perturb(params, 5, 0.05);
    params.emplace_back("x", x);
    auto loss = [&] {
      const auto l = sbr::detection_loss(head(x), labels, targets);
      return nn::add(l.cls, l.box);
    };
    sbr::testing::GradCheckOptions opt;
    opt.max_coords_per_input = 8;
    const auto rep = sbr::testing::check_gradients(loss, params, opt);
    INFO(sbr::det_variant_name(v) << " " << rep.worst_input);
    CHECK(rep.max_rel_error < 1e-4);
  }
}

TEST_CASE("detection loss cases") {
  nn::Rng rng(3);
  const sbr::DetectionHead<double> head(small(DetVariant::kL2c7x7, 2), rng);
  const auto out = head(randn({3, 8, 7, 7}, 6));
  const int bg[] = {0, 0, 0};
  const sbr::BoxDeltas t[3] = {};
  const auto l = sbr::detection_loss(out, bg, t);
  CHECK(l.num_positive == 0);
  CHECK(l.box.item() == 0.0);
  CHECK(l.cls.item() > 0.0);
  const int pos[] = {1, 2, 0};
  const sbr::BoxDeltas big[3] = {{1, 1, 1, 1}, {1, 1, 1, 1}, {}};
  const auto lp = sbr::detection_loss(out, pos, big);
  CHECK(lp.num_positive == 2);
  CHECK(lp.box.item() > 0.0);
}

TEST_CASE("mask head internal loop") {
  nn::Rng rng(4);
  const sbr::MaskHead<double> head(small(DetVariant::kL2c7x7, 3), rng);
  const D x = randn({2, 8, 14, 14}, 7);
  const auto p0 = head.num_parameters();
  D first;
  for (int t = 1; t <= 5; ++t) {
    const auto y = head(x, t);
    CHECK(y.shape() == Shape{2, 3, 28, 28});
    CHECK(head.last_m1_applications() == t);
    CHECK(head.num_parameters() == p0);
    if (t == 1) first = y;
  }
  const auto y3 = head(x, 3);
  double diff = 0;
  for (std::int64_t i = 0; i < y3.numel(); ++i) diff = std::max(diff, std::abs(y3.values()[i] - first.values()[i]));
  CHECK(diff > 1e-9);
  CHECK_THROWS(head(x, 0));
  CHECK_THROWS(head(randn({1, 8, 7, 7}, 1), 1));
}

TEST_CASE("mask head t=1 is a single pass from the bias of C1") {
  nn::Rng rng(5);
  HeadConfig cfg = small(DetVariant::kL2c7x7, 2);
  const sbr::MaskHead<double> head(cfg, rng);
  auto params = head.named_parameters();
  // Give C1 a non-zero bias and compare with an explicit composition.
  for (auto& [name, t] : params)
    if (name == "c1.bias")
      for (auto& v : t.values()) v = 0.25;
  const D x = randn({1, 8, 14, 14}, 8);
  const auto y = head(x, 1);

  D shifted = x.clone();
  for (auto& v : shifted.values()) v += 0.25;
  D h = shifted;
  for (int i = 0; i < 2; ++i) {
    const auto& w = params[2 * i].second;
    const auto& b = params[2 * i + 1].second;
    h = nn::relu(nn::conv2d(h, w, b, {1, 1, 1, 1}));
  }
  auto find = [&](const std::string& n) {
    for (auto& [name, t] : params)
      if (name == n) return t;
    throw std::runtime_error(n);
  };
  h = nn::relu(nn::conv_transpose2x2(h, find("up.weight"), find("up.bias")));
  h = nn::conv2d(h, find("c2.weight"), find("c2.bias"));
  double diff = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) diff = std::max(diff, std::abs(y.values()[i] - h.values()[i]));
  CHECK(diff < 1e-12);
}

TEST_CASE("mask loss gradient through two internal iterations") {
  nn::Rng rng(6);
  const sbr::MaskHead<double> head(small(DetVariant::kL2c7x7, 2), rng);
  D x = randn({2, 8, 14, 14}, 9, 0.5);
  x.set_requires_grad(true);
  const int labels[] = {1, 2};
  D target({2, 28, 28}, 0.0);
  for (std::int64_t i = 0; i < target.numel(); ++i) target.values()[i] = (i % 7) < 3 ? 1.0 : 0.0;
  auto params = head.named_parameters("mask");
  // Zero biases put dead-ReLU outputs exactly on the kink; move them off it.
  perturb(params, 11, 0.05);
  params.emplace_back("x", x);
  auto loss = [&] { return sbr::mask_loss(head(x, 2), labels, target); };
  sbr::testing::GradCheckOptions opt;
  opt.max_coords_per_input = 8;
  const auto rep = sbr::testing::check_gradients(loss, params, opt);
  INFO(rep.worst_input);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("mask iou head") {
  nn::Rng rng(7);
  for (DetVariant v : {DetVariant::kFcBaseline, DetVariant::kL2c7x7, DetVariant::kL2cRect, DetVariant::kL2c7x7NlB}) {
    HeadConfig cfg = small(v, 3);
    cfg.maskiou_enabled = true;
    const sbr::MaskIouHead<double> head(cfg, rng);
    const auto y = head(randn({4, 8, 14, 14}, 10), D({4, 1, 28, 28}, 0.5));
    CHECK(y.shape() == Shape{4, 3});
  }
}
