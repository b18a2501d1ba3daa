// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include "doctest.h"
#include "sbr/nets.hpp"
#include "sbr/nn/optim.hpp"
#include "sbr/synthdata.hpp"
#include "support/gradcheck.hpp"

using sbr::Box;
using sbr::nn::Shape;
using sbr::nn::Tensor;
namespace nn = sbr::nn;

namespace {

template <typename T>
Tensor<T> noise(Shape shape, std::uint64_t seed, double s = 1.0) {
  Tensor<T> t(std::move(shape), T(0));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, s);
  for (auto& v : t.values()) v = static_cast<T>(n(rng));
  return t;
}

}  // namespace

TEST_CASE("backbone and fpn shapes") {
  nn::Rng rng(0);
  sbr::BackboneConfig bc;
  bc.width = 8;
  sbr::Backbone<float> bb(bc, rng);
  sbr::Fpn<float> fpn(bb.out_channels(), bb.strides(), 64, rng);
  CHECK(bb.strides() == std::vector<int>{4, 8, 16, 32});

  const auto p = fpn(bb(noise<float>({1, 1, 256, 256}, 1)));
  REQUIRE(p.levels.size() == 4);
  const int expect[] = {64, 32, 16, 8};
  for (int l = 0; l < 4; ++l) {
    CHECK(p.levels[l].shape() == Shape{1, 64, expect[l], expect[l]});
  }

  const auto q = fpn(bb(noise<float>({2, 1, 128, 128}, 2)));
  for (int l = 0; l < 4; ++l) CHECK(q.levels[l].dim(2) * 2 == p.levels[l].dim(2));

  // Non-multiple sizes are padded up to the largest stride.
  const auto r = fpn(bb(noise<float>({1, 1, 70, 64}, 3)));
  CHECK(r.levels[0].dim(2) == 24);
}

TEST_CASE("zero image with zero-init final norms stays finite") {
  nn::Rng rng(1);
  sbr::BackboneConfig bc;
  bc.width = 8;
  bc.zero_init_last_norm = true;
  sbr::Backbone<float> bb(bc, rng);
  sbr::Fpn<float> fpn(bb.out_channels(), bb.strides(), 16, rng);
  const auto p = fpn(bb(Tensor<float>({1, 1, 64, 64}, 0.0f)));
  for (const auto& l : p.levels)
    for (float v : l.values()) CHECK(std::isfinite(v));
}

TEST_CASE("rpn head output layout follows anchor order") {
  nn::Rng rng(2);
  sbr::RpnHead<float> head(8, 3, rng);
  sbr::FeaturePyramid<float> p;
  p.levels = {noise<float>({2, 8, 4, 4}, 1), noise<float>({2, 8, 2, 2}, 2)};
  p.strides = {16, 32};
  p.channels = 8;
  const auto out = head(p);
  const auto grid = sbr::pyramid_anchors({64, 64}, p.strides, {});
  CHECK(out.objectness.shape() == Shape{2, static_cast<std::int64_t>(grid.total())});
  CHECK(out.deltas.shape() == Shape{2, static_cast<std::int64_t>(grid.total()), 4});
  CHECK(out.objectness_of(1).shape() == Shape{static_cast<std::int64_t>(grid.total())});
}

TEST_CASE("proposal cap, nms and determinism") {
  const auto grid = sbr::pyramid_anchors({64, 64}, std::vector<int>{4, 8, 16, 32}, {});
  const auto n = static_cast<std::int64_t>(grid.total());
  const auto obj = noise<float>({n}, 4);
  const Tensor<float> del({n, 4}, 0.0f);
  sbr::ProposalParams pp;
  pp.post_nms_top_n = 50;
  const auto a = sbr::rpn_proposals(obj, del, grid, {64, 64}, pp);
  CHECK(a.boxes.size() <= 50);
  CHECK(std::is_sorted(a.scores.rbegin(), a.scores.rend()));
  for (std::size_t i = 0; i < a.boxes.size(); ++i) {
    CHECK(a.boxes[i].x1 >= 0);
    CHECK(a.boxes[i].x2 <= 64);
    for (std::size_t j = 0; j < i; ++j) CHECK(sbr::iou(a.boxes[i], a.boxes[j]) <= 0.7);
  }
  const auto b = sbr::rpn_proposals(obj, del, grid, {64, 64}, pp);
  CHECK(a.boxes == b.boxes);

  pp.score_floor = 1.1;
  CHECK(sbr::rpn_proposals(obj, del, grid, {64, 64}, pp).boxes.empty());
}

TEST_CASE("anchor labelling") {
  const std::vector<Box> anchors{{0, 0, 10, 10}, {0, 0, 10, 13}, {30, 30, 40, 40}, {0, 0, 10, 25}};
  const std::vector<Box> gts{{0, 0, 10, 10}, {20, 20, 26, 26}};
  std::vector<int> matched;
  const auto l = sbr::label_anchors(anchors, gts, {}, &matched);
  CHECK(l == std::vector<int>{1, 1, 0, -1});
  CHECK(matched[0] == 0);
  // Second gt's best IoU is 0.16 < 0.3, so no low-quality positive.
  const std::vector<Box> gts2{{0, 0, 10, 20}};
  const auto l2 = sbr::label_anchors(anchors, gts2, {});
  // Best anchor (IoU 0.8 with the 25-tall box... ) is promoted.
  CHECK(l2[3] == 1);
  CHECK(l2[2] == 0);
}

TEST_CASE("rpn loss limits") {
  const std::vector<Box> anchors{{0, 0, 10, 10}, {40, 40, 50, 50}, {20, 0, 30, 10}};
  const std::vector<Box> gts{{0, 0, 10, 10}};
  Tensor<double> perfect({3}, std::vector<double>{20, -20, -20});
  Tensor<double> zero({3, 4}, 0.0);
  const auto l = sbr::rpn_loss(perfect, zero, anchors, gts, {}, 0);
  CHECK(l.objectness.item() < 1e-3);
  CHECK(l.box.item() == 0.0);
  CHECK(l.num_positive == 1);
  CHECK(l.num_negative == 2);

  const auto r = sbr::rpn_loss(noise<double>({3}, 1), noise<double>({3, 4}, 2), anchors, gts, {}, 0);
  CHECK(std::isfinite(r.objectness.item()));
  CHECK(r.objectness.item() > 0);
  CHECK(r.box.item() > 0);

  const std::vector<Box> none;
  const auto e = sbr::rpn_loss(perfect, zero, anchors, none, {}, 0);
  CHECK(e.box.item() == 0.0);
  CHECK(e.objectness.item() > 0.0);
}

TEST_CASE("rpn loss gradient on a three-anchor instance") {
  const std::vector<Box> anchors{{0, 0, 10, 10}, {2, 1, 12, 11}, {30, 30, 40, 40}};
  const std::vector<Box> gts{{1, 0, 11, 11}};
  auto obj = noise<double>({3}, 5).set_requires_grad(true);
  auto del = noise<double>({3, 4}, 6, 0.3).set_requires_grad(true);
  sbr::RpnLossParams params;
  params.smooth_l1_beta = 0.01;  // keeps every coordinate away from the kink
  auto f = [&] {
    const auto l = sbr::rpn_loss(obj, del, anchors, gts, params, 0);
    return nn::add(l.objectness, l.box);
  };
  REQUIRE(sbr::rpn_loss(obj, del, anchors, gts, params, 0).num_positive == 2);
  const auto rep = sbr::testing::check_gradients(f, {{"obj", obj}, {"del", del}});
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("rpn overfits one image") {
  sbr::GeneratorParams gp;
  gp.num_images = 1;
  gp.seed = 3;
  gp.min_instances = 2;
  gp.max_instances = 3;
  const auto data = sbr::generate_dataset(gp);
  std::vector<Box> gts;
  for (const auto& a : data.manifest.annotations) gts.push_back(a.box);
  REQUIRE(gts.size() >= 2);
  Tensor<float> image({1, 1, 64, 64}, 0.0f);
  for (int i = 0; i < 64 * 64; ++i) image.values()[i] = data.images[0].pixels[i] / 255.0f;

  nn::Rng rng(7);
  sbr::BackboneConfig bc;
  bc.width = 16;
  sbr::Backbone<float> bb(bc, rng);
  sbr::Fpn<float> fpn(bb.out_channels(), bb.strides(), 32, rng);
  sbr::RpnHead<float> head(32, 3, rng);
  nn::NamedTensors<float> params = bb.named_parameters("bb");
  for (auto& p : fpn.named_parameters("fpn")) params.push_back(p);
  for (auto& p : head.named_parameters("rpn")) params.push_back(p);
  nn::Sgd<float> opt(params, {0.9, 1e-4, 10.0});
  const auto grid = sbr::pyramid_anchors({64, 64}, bb.strides(), {});
  const auto anchors = grid.flatten();

  for (int step = 0; step < 150; ++step) {
    opt.zero_grad();
    const auto out = head(fpn(bb(image)));
    const auto l = sbr::rpn_loss(out.objectness_of(0), out.deltas_of(0), anchors, gts, {}, step);
    nn::add(l.objectness, l.box).backward();
    opt.step(0.01);
  }
  nn::NoGradGuard ng;
  const auto out = head(fpn(bb(image)));
  sbr::ProposalParams pp;
  pp.post_nms_top_n = 300;
  const auto props = sbr::rpn_proposals(out.objectness_of(0), out.deltas_of(0), grid, {64, 64}, pp);
  CHECK(props.boxes.size() <= 300);
  for (const auto& g : gts) {
    double best = 0;
    for (const auto& b : props.boxes) best = std::max(best, sbr::iou(b, g));
    CHECK(best >= 0.5);
  }
  // Identical weights and input give identical proposals.
  const auto out2 = head(fpn(bb(image)));
  const auto props2 =
      sbr::rpn_proposals(out2.objectness_of(0), out2.deltas_of(0), grid, {64, 64}, pp);
  CHECK(props.boxes == props2.boxes);
}
