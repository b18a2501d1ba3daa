// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "sbr/nn/layers.hpp"
#include "sbr/nn/losses.hpp"
#include "sbr/nn/ops.hpp"
#include "sbr/nn/optim.hpp"
#include "support/gradcheck.hpp"

using sbr::nn::Shape;
using sbr::nn::Tensor;
using D = Tensor<double>;
namespace nn = sbr::nn;

namespace {

D randn(Shape shape, std::mt19937_64& rng, double s = 1.0, bool grad = true) {
  D t(std::move(shape), 0.0);
  std::normal_distribution<double> n(0.0, s);
  for (auto& v : t.values()) v = n(rng);
  t.set_requires_grad(grad);
  return t;
}

// Fixed random projection to a scalar so every output coordinate matters.
D project(const D& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  D w = randn(y.shape(), rng, 1.0, false);
  return nn::sum(nn::mul(y, w));
}

}  // namespace

#define CHECK_GRAD(loss, ...)                                                     \
  do {                                                                            \
    auto rep = sbr::testing::check_gradients(loss, {__VA_ARGS__});                \
    INFO("worst " << rep.worst_input << " analytic " << rep.worst_analytic        \
                  << " numeric " << rep.worst_numeric);                           \
    CHECK(rep.max_rel_error < 1e-4);                                              \
  } while (0)

TEST_CASE("tensor basics") {
  D t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK(t.at({1, 2}) == 6.0);
  CHECK_THROWS(D({2, 2}, std::vector<double>{1, 2, 3}));
  auto c = t.clone();
  c.values()[0] = 10;
  CHECK(t.values()[0] == 1.0);
}

TEST_CASE("no-grad guard suppresses graph recording") {
  std::mt19937_64 rng(1);
  D a = randn({3}, rng);
  {
    nn::NoGradGuard g;
    CHECK_FALSE(nn::relu(a).requires_grad());
  }
  CHECK(nn::relu(a).requires_grad());
}

TEST_CASE("elementwise gradients") {
  std::mt19937_64 rng(2);
  D a = randn({3, 4}, rng), b = randn({3, 4}, rng);
  auto f = [&] {
    auto y = nn::add(nn::mul(a, nn::sigmoid(b)), nn::sub(nn::relu(a), nn::scale(b, 0.3)));
    return nn::add(project(y), nn::mean(nn::add_n<double>({a, b, a})));
  };
  CHECK_GRAD(f, {"a", a}, {"b", b});
}

TEST_CASE("reshape, permute, concat, index_select, select_channel") {
  std::mt19937_64 rng(3);
  D a = randn({2, 3, 4}, rng), b = randn({2, 2, 4}, rng);
  std::vector<int> rows{1, 0, 1};
  std::vector<int> ch{2, 0};
  auto f = [&] {
    auto c = nn::concat<double>({a, b}, 1);                // [2,5,4]
    auto p = nn::permute(c, {2, 0, 1});                     // [4,2,5]
    auto r = nn::reshape(p, {4, 10});
    auto s = nn::index_select(nn::permute(a, {1, 0, 2}), rows);  // [3,2,4]
    auto q = nn::select_channel(a, ch);                     // [2,4]
    return nn::add(nn::add(project(r, 1), project(s, 2)), project(q, 3));
  };
  CHECK_GRAD(f, {"a", a}, {"b", b});

  auto c = nn::concat<double>({a, b}, 1);
  CHECK(c.shape() == Shape{2, 5, 4});
  CHECK(c.at({1, 3, 2}) == b.at({1, 0, 2}));
  auto p = nn::permute(a, {2, 0, 1});
  CHECK(p.at({3, 1, 2}) == a.at({1, 2, 3}));
}

TEST_CASE("bmm in every transpose combination") {
  std::mt19937_64 rng(4);
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      D a = randn(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng);
      D b = randn(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng);
      auto f = [&] { return project(nn::bmm(a, b, ta, tb)); };
      CHECK_GRAD(f, {"a", a}, {"b", b});
      auto y = nn::bmm(a, b, ta, tb);
      CHECK(y.shape() == Shape{2, 3, 5});
      double ref = 0;
      for (int k = 0; k < 4; ++k)
        ref += (ta ? a.at({1, k, 2}) : a.at({1, 2, k})) * (tb ? b.at({1, 3, k}) : b.at({1, k, 3}));
      CHECK(y.at({1, 2, 3}) == doctest::Approx(ref));
    }
}

TEST_CASE("softmax rows sum to one and differentiate") {
  std::mt19937_64 rng(5);
  D a = randn({3, 6}, rng, 2.0);
  auto s = nn::softmax(a);
  for (int i = 0; i < 3; ++i) {
    double t = 0;
    for (int j = 0; j < 6; ++j) t += s.at({i, j});
    CHECK(t == doctest::Approx(1.0));
  }
  auto f = [&] { return project(nn::softmax(a)); };
  CHECK_GRAD(f, {"a", a});
}

TEST_CASE("linear") {
  std::mt19937_64 rng(6);
  D x = randn({4, 5}, rng), w = randn({3, 5}, rng), b = randn({3}, rng);
  auto f = [&] { return project(nn::linear(x, w, b)); };
  CHECK_GRAD(f, {"x", x}, {"w", w}, {"b", b});
  auto g = [&] { return project(nn::linear(x, w, D())); };
  CHECK_GRAD(g, {"x", x}, {"w", w});
}

TEST_CASE("conv2d against direct summation") {
  std::mt19937_64 rng(7);
  D x = randn({2, 3, 6, 5}, rng), w = randn({4, 3, 3, 2}, rng), b = randn({4}, rng);
  nn::Conv2dSpec spec{2, 1, 1, 1};
  auto y = nn::conv2d(x, w, b, spec);
  const int oh = (6 + 2 - 3) / 2 + 1, ow = (5 + 2 - 2) / 1 + 1;
  REQUIRE(y.shape() == Shape{2, 4, oh, ow});
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double ref = b.at({o});
          for (int c = 0; c < 3; ++c)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 2; ++kj) {
                const int yy = i * 2 - 1 + ki, xx = j - 1 + kj;
                if (yy < 0 || yy >= 6 || xx < 0 || xx >= 5) continue;
                ref += x.at({n, c, yy, xx}) * w.at({o, c, ki, kj});
              }
          CHECK(y.at({n, o, i, j}) == doctest::Approx(ref));
        }
}

TEST_CASE("conv2d gradients: square, rectangular, strided") {
  std::mt19937_64 rng(8);
  struct Case { int kh, kw; nn::Conv2dSpec spec; };
  const Case cases[] = {{3, 3, {1, 1, 1, 1}}, {7, 3, {1, 1, 3, 1}}, {3, 7, {1, 1, 1, 3}},
                        {3, 3, {2, 2, 1, 1}}, {1, 1, {1, 1, 0, 0}}, {7, 7, {1, 1, 3, 3}}};
  for (const auto& c : cases) {
    D x = randn({2, 3, 7, 7}, rng), w = randn({2, 3, c.kh, c.kw}, rng, 0.3), b = randn({2}, rng);
    auto f = [&] { return project(nn::conv2d(x, w, b, c.spec)); };
    CHECK_GRAD(f, {"x", x}, {"w", w}, {"b", b});
    if (c.kh == 7 || c.kw == 7) {
      auto y = nn::conv2d(x, w, b, c.spec);
      CHECK(y.dim(2) == 7);
      CHECK(y.dim(3) == 7);
    }
  }
}

TEST_CASE("conv_transpose2x2") {
  std::mt19937_64 rng(9);
  D x = randn({2, 3, 3, 2}, rng), w = randn({3, 4, 2, 2}, rng), b = randn({4}, rng);
  auto y = nn::conv_transpose2x2(x, w, b);
  REQUIRE(y.shape() == Shape{2, 4, 6, 4});
  double ref = b.at({1});
  for (int c = 0; c < 3; ++c) ref += x.at({1, c, 2, 1}) * w.at({c, 1, 1, 0});
  CHECK(y.at({1, 1, 5, 2}) == doctest::Approx(ref));
  auto f = [&] { return project(nn::conv_transpose2x2(x, w, b)); };
  CHECK_GRAD(f, {"x", x}, {"w", w}, {"b", b});
}

TEST_CASE("group_norm") {
  std::mt19937_64 rng(10);
  D x = randn({2, 4, 3, 3}, rng, 2.0), g = randn({4}, rng), b = randn({4}, rng);
  auto f = [&] { return project(nn::group_norm(x, g, b, 2)); };
  CHECK_GRAD(f, {"x", x}, {"g", g}, {"b", b});

  D ones({4}, 1.0), zeros({4}, 0.0);
  auto y = nn::group_norm(x, ones, zeros, 2);
  double m = 0, v = 0;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 9; ++i) m += y.at({1, 2 + c, i / 3, i % 3});
  m /= 18;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 9; ++i) v += std::pow(y.at({1, 2 + c, i / 3, i % 3}) - m, 2);
  CHECK(m == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(v / 18 == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("pooling, upsampling, padding") {
  std::mt19937_64 rng(11);
  D x = randn({1, 2, 5, 4}, rng);
  auto p = nn::max_pool2x2(x);
  REQUIRE(p.shape() == Shape{1, 2, 2, 2});
  CHECK(p.at({0, 1, 1, 0}) == std::max({x.at({0, 1, 2, 0}), x.at({0, 1, 2, 1}),
                                        x.at({0, 1, 3, 0}), x.at({0, 1, 3, 1})}));
  auto u = nn::upsample_nearest(x, 2);
  CHECK(u.at({0, 1, 9, 7}) == x.at({0, 1, 4, 3}));
  auto pad = nn::pad_bottom_right(x, 1, 2);
  CHECK(pad.shape() == Shape{1, 2, 6, 6});
  CHECK(pad.at({0, 0, 5, 5}) == 0.0);
  auto f = [&] {
    return nn::add(nn::add(project(nn::max_pool2x2(x), 1), project(nn::upsample_nearest(x, 2), 2)),
                   project(nn::pad_bottom_right(x, 1, 2), 3));
  };
  CHECK_GRAD(f, {"x", x});
}

TEST_CASE("loss values") {
  D logits({2, 3}, std::vector<double>{2, 0, 0, 0, 0, 0});
  const std::vector<int> labels{0, 2};
  const double e = std::exp(2.0);
  const double ref = 0.5 * (-std::log(e / (e + 2)) - std::log(1.0 / 3.0));
  CHECK(nn::cross_entropy(logits, labels).item() == doctest::Approx(ref));
  const std::vector<int> bad{0, 3};
  CHECK_THROWS(nn::cross_entropy(logits, bad));

  D z({2}, std::vector<double>{0.0, 0.0}), t({2}, std::vector<double>{1.0, 0.0});
  CHECK(nn::bce_with_logits(z, t).item() == doctest::Approx(std::log(2.0)));

  D p({3}, std::vector<double>{0.5, 2.0, -3.0}), q({3}, 0.0);
  CHECK(nn::smooth_l1(p, q, 1.0).item() == doctest::Approx(0.125 + 1.5 + 2.5));
  CHECK(nn::squared_error(p, q).item() == doctest::Approx(0.25 + 4 + 9));
}

TEST_CASE("loss gradients") {
  std::mt19937_64 rng(12);
  D logits = randn({5, 4}, rng);
  const std::vector<int> labels{0, 3, 1, 1, 2};
  D mlog = randn({3, 4}, rng, 2.0);
  D mt({3, 4}, 0.0);
  for (int i = 0; i < 12; ++i) mt.values()[i] = i % 3 == 0 ? 1.0 : 0.0;
  D pred = randn({6}, rng, 2.0), target = randn({6}, rng, 1.0, false);
  auto f = [&] {
    return nn::add_n<double>({nn::cross_entropy(logits, labels), nn::bce_with_logits(mlog, mt),
                              nn::smooth_l1(pred, target, 1.0 / 9.0),
                              nn::squared_error(pred, target)});
  };
  CHECK_GRAD(f, {"logits", logits}, {"mlog", mlog}, {"pred", pred});
}

TEST_CASE("undefined bias keeps backward well-formed") {
  std::mt19937_64 rng(13);
  D x = randn({1, 2, 4, 4}, rng), w = randn({3, 2, 3, 3}, rng);
  auto y = nn::sum(nn::conv2d(x, w, D(), {1, 1, 1, 1}));
  y.backward();
  CHECK(w.has_grad());
  CHECK(x.has_grad());
}

TEST_CASE("layers report parameter counts") {
  nn::Rng rng(0);
  nn::Conv2d<float> c(256, 128, 7, 7, {1, 1, 3, 3}, nn::Init::kaiming_fan_out(), rng);
  CHECK(c.num_parameters() == 1605760);
  nn::Linear<float> l(1024, 1024, nn::Init::normal(0.01), rng);
  CHECK(l.num_parameters() == 1049600);
  nn::GroupNorm<float> g(32, 8);
  CHECK(g.num_parameters() == 64);
  CHECK(nn::group_count(12) == 6);
  CHECK(nn::group_count(7) == 7);
}

TEST_CASE("shape-only scope skips sampling and restores on exit") {
  nn::Rng a(3), b(3);
  {
    const nn::ShapeOnlyScope outer;
    {
      const nn::ShapeOnlyScope inner;
    }
    const nn::Linear<float> l(64, 32, nn::Init::normal(0.1), a);
    CHECK(l.num_parameters() == 64 * 32 + 32);
    for (float v : l.weight.values()) CHECK(v == 0.0f);
  }
  CHECK(a() == b());  // the generator was not advanced
  const nn::Linear<float> l(4, 2, nn::Init::normal(0.1), a);
  bool any = false;
  for (float v : l.weight.values()) any = any || v != 0.0f;
  CHECK(any);
}

TEST_CASE("sgd minimises a quadratic") {
  D x({3}, std::vector<double>{3, -2, 1});
  x.set_requires_grad(true);
  nn::Sgd<double> opt({{"x", x}}, {0.9, 0.0, 0.0});
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    auto l = nn::sum(nn::mul(x, x));
    l.backward();
    opt.step(0.05);
  }
  for (double v : x.values()) CHECK(std::abs(v) < 1e-4);
}
