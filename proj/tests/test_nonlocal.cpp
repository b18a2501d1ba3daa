// Copyright 2026 The SBR-CNN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include "doctest.h"
#include "sbr/nn/ops.hpp"
#include "sbr/nonlocal.hpp"
#include "support/gradcheck.hpp"

using sbr::NonLocalBlock;
using sbr::NonLocalConfig;
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

void randomize(nn::Conv2d<double>& c, std::uint64_t seed, double s) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, s);
  for (auto& v : c.weight.values()) v = n(rng);
}

}  // namespace

TEST_CASE("fresh non-local block is the identity") {
  nn::Rng rng(0);
  NonLocalBlock<double> b(8, {}, rng);
  const D x = randn({2, 8, 5, 5}, 1);
  const D y = b(x);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("attention rows are distributions") {
  nn::Rng rng(1);
  NonLocalBlock<double> b(8, {3, 2, false}, rng);
  randomize(b.theta, 2, 0.3);
  randomize(b.phi, 3, 0.3);
  const D a = b.attention(randn({2, 8, 4, 3}, 4));
  REQUIRE(a.shape() == Shape{2, 12, 12});
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 12; ++i) {
      double s = 0;
      for (int j = 0; j < 12; ++j) {
        CHECK(a.at({n, i, j}) >= 0.0);
        s += a.at({n, i, j});
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("1x1 block is equivariant to spatial permutation") {
  nn::Rng rng(2);
  NonLocalBlock<double> b(4, {1, 2, false}, rng);
  randomize(b.theta, 5, 0.5);
  randomize(b.phi, 6, 0.5);
  randomize(b.out, 7, 0.5);
  const D x = randn({1, 4, 2, 2}, 8);
  // Swap positions (0,0) <-> (1,1).
  D xp = x.clone();
  for (int c = 0; c < 4; ++c) {
    xp.data()[c * 4 + 0] = x.at({0, c, 1, 1});
    xp.data()[c * 4 + 3] = x.at({0, c, 0, 0});
  }
  const D y = b(x), yp = b(xp);
  for (int c = 0; c < 4; ++c) {
    CHECK(yp.at({0, c, 0, 0}) == doctest::Approx(y.at({0, c, 1, 1})));
    CHECK(yp.at({0, c, 1, 1}) == doctest::Approx(y.at({0, c, 0, 0})));
    CHECK(yp.at({0, c, 0, 1}) == doctest::Approx(y.at({0, c, 0, 1})));
  }
}

TEST_CASE("non-local gradient") {
  nn::Rng rng(3);
  NonLocalBlock<double> b(4, {3, 2, false}, rng);
  randomize(b.out, 9, 0.2);
  randomize(b.theta, 10, 0.2);
  randomize(b.phi, 11, 0.2);
  D x = randn({2, 4, 3, 3}, 12);
  x.set_requires_grad(true);
  auto inputs = b.named_parameters("nl");
  inputs.emplace_back("x", x);
  const D w = randn({2, 4, 3, 3}, 13);
  auto loss = [&] { return nn::sum(nn::mul(b(x), w)); };
  sbr::testing::GradCheckOptions opt;
  opt.max_coords_per_input = 15;
  // A phi bias shifts each softmax row uniformly, so its true gradient is zero
  // and only finite-difference noise remains; the floor absorbs that.
  opt.floor = 1e-5;
  const auto rep = sbr::testing::check_gradients(loss, inputs, opt);
  INFO(rep.worst_input);
  CHECK(rep.max_rel_error < 1e-4);

  for (auto& [name, t] : inputs) t.zero_grad();
  loss().backward();
  for (double v : b.phi.bias.grad()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("non-local parameter counts") {
  nn::Rng rng(4);
  CHECK(NonLocalBlock<float>(256, {7, 2, false}, rng).num_parameters() == 6423168);
  // theta/phi 7x7, g and out 1x1.
  const std::int64_t tp = 2 * (256LL * 128 * 49 + 128), rest = 256LL * 128 + 128 + 128LL * 256 + 256;
  CHECK(NonLocalBlock<float>(256, {7, 2, true}, rng).num_parameters() == tp + rest);
  CHECK(NonLocalBlock<float>(256, {1, 2, false}, rng).num_parameters() == 3 * (256LL * 128 + 128) + 128LL * 256 + 256);
  CHECK_THROWS(NonLocalBlock<float>(255, {7, 2, false}, rng));
  NonLocalBlock<double> b(4, {}, rng);
  CHECK_THROWS(b(randn({1, 3, 2, 2}, 1)));
}
