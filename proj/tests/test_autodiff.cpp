// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "facedancer/nn.hpp"
#include "gradcheck.hpp"

using namespace facedancer;
using facedancer::testing::gradcheck;
using V = Var<double>;
using Vs = std::vector<V>;

namespace {

Tensor<double> rand_t(const Shape& s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return random_normal<double>(s, rng, sd);
}

Tensor<double> positive_t(const Shape& s, std::uint64_t seed) {
  Tensor<double> t = rand_t(s, seed);
  for (auto& v : t.span()) v = 0.5 + std::abs(v);
  return t;
}

template <typename F>
void expect_gradcheck(F f, std::vector<Tensor<double>> in) {
  auto r = gradcheck(f, std::move(in));
  INFO(r.where);
  CHECK(r.ok);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences", "[autodiff]") {
  const Shape s{2, 3};
  expect_gradcheck([](const Vs& v) { return sum(mul(add(v[0], v[1]), sub(v[0], v[1]))); },
                   {rand_t(s, 1), rand_t(s, 2)});
  expect_gradcheck([](const Vs& v) { return sum(div(v[0], v[1])); },
                   {rand_t(s, 3), positive_t(s, 4)});
  expect_gradcheck([](const Vs& v) { return sum(sqrt(v[0])); }, {positive_t(s, 5)});
  expect_gradcheck([](const Vs& v) { return sum(rsqrt(v[0])); }, {positive_t(s, 6)});
  expect_gradcheck([](const Vs& v) { return sum(mul(abs(v[0]), v[0])); }, {rand_t(s, 7)});
  expect_gradcheck([](const Vs& v) { return sum(square(leaky_relu(v[0], 0.2))); },
                   {rand_t(s, 8)});
  expect_gradcheck([](const Vs& v) { return sum(square(sigmoid(v[0]))); }, {rand_t(s, 9)});
  expect_gradcheck([](const Vs& v) { return sum(square(tanh(v[0]))); }, {rand_t(s, 10)});
  expect_gradcheck([](const Vs& v) { return sum(scale(add_scalar(square(v[0]), 3.0), 0.5)); },
                   {rand_t(s, 11)});
}

TEST_CASE("reductions and broadcasts match finite differences", "[autodiff]") {
  const Shape s{2, 3, 2, 2};
  const auto w = rand_t(s, 20);
  expect_gradcheck(
      [&](const Vs& v) {
        const V b = broadcast_channels(v[1], s);
        const V p = broadcast_samples(reduce_samples(square(v[0])), s);
        const V m = mean_channels(v[0]);
        return add(sum(mul(mul(add(v[0], b), p), V::constant(w))), sum(square(m)));
      },
      {rand_t(s, 21), rand_t(Shape{3}, 22)});
  expect_gradcheck(
      [&](const Vs& v) {
        const V b = broadcast_channels(v[1], s);
        return sum(mul(square(add(v[0], b)), V::constant(w)));
      },
      {rand_t(s, 23), rand_t(Shape{2, 3}, 24)});
  expect_gradcheck([&](const Vs& v) { return sum(mul(instance_norm(v[0]), V::constant(w))); },
                   {rand_t(s, 25)});
  expect_gradcheck(
      [&](const Vs& v) { return sum(cosine_similarity_rows(flatten(v[0]), flatten(v[1]))); },
      {rand_t(s, 26), rand_t(s, 27)});
}

TEST_CASE("structural ops match finite differences", "[autodiff]") {
  const Shape s{2, 2, 4, 4};
  const auto w2 = rand_t(Shape{2, 4, 4, 4}, 30);
  expect_gradcheck(
      [&](const Vs& v) {
        const V c = concat_channels(Vs{v[0], v[1]});
        return sum(mul(square(c), V::constant(w2)));
      },
      {rand_t(s, 31), rand_t(s, 32)});
  expect_gradcheck(
      [&](const Vs& v) {
        return sum(square(slice_channels(reshape(v[0], Shape{2, 4, 2, 4}), 1, 2)));
      },
      {rand_t(s, 33)});
  expect_gradcheck([&](const Vs& v) { return sum(square(avg_pool2(v[0]))); }, {rand_t(s, 34)});
  expect_gradcheck([&](const Vs& v) { return sum(square(upsample2(v[0]))); }, {rand_t(s, 35)});
  expect_gradcheck([&](const Vs& v) { return sum(square(resize_bilinear(v[0], 3, 7))); },
                   {rand_t(s, 36)});
  expect_gradcheck([&](const Vs& v) { return sum(square(max_pool3s2(v[0]))); }, {rand_t(s, 37)});
  expect_gradcheck([&](const Vs& v) { return sum(square(matmul(v[0], v[1], false, true))); },
                   {rand_t(Shape{3, 4}, 38), rand_t(Shape{5, 4}, 39)});
  expect_gradcheck([&](const Vs& v) { return sum(square(matmul(v[0], v[1], true, false))); },
                   {rand_t(Shape{4, 3}, 40), rand_t(Shape{4, 5}, 41)});
}

TEST_CASE("convolution matches finite differences for several geometries", "[autodiff]") {
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, {3, 2, 1}, {1, 1, 0}, {1, 2, 0}, {7, 2, 3}}) {
    const Shape xs{2, 3, 8, 8};
    const Shape ws{4, 3, k, k};
    expect_gradcheck(
        [&](const Vs& v) { return sum(square(conv2d(v[0], v[1], ConvGeom{stride, pad}))); },
        {rand_t(xs, 50 + k), rand_t(ws, 60 + k, 0.3)});
  }
}

TEST_CASE("conv2d matches a direct loop", "[autodiff]") {
  const auto x = rand_t(Shape{1, 2, 5, 5}, 70);
  const auto w = rand_t(Shape{3, 2, 3, 3}, 71);
  NoGrad ng;
  const auto y = conv2d(V::constant(x), V::constant(w), ConvGeom{2, 1}).value();
  REQUIRE(y.shape() == Shape{1, 3, 3, 3});
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double acc = 0;
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              acc += x.at(0, c, iy, ix) * w.at(o, c, ky, kx);
            }
        CHECK(y.at(0, o, oy, ox) == Catch::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("second-order gradients match finite differences of first-order gradients",
          "[autodiff]") {
  // Penalty on the input-gradient norm of a small critic, differentiated with
  // respect to the critic weights: exercises every double-backward rule the
  // gradient penalty needs.
  const Shape xs{2, 2, 4, 4};
  const auto x0 = rand_t(xs, 80);
  auto penalty = [&](const Vs& v) {
    const V x = V::leaf(x0);
    V h = leaky_relu(conv2d(x, v[0], ConvGeom{1, 1}), 0.2);
    h = avg_pool2(h);
    h = add(h, broadcast_channels(v[2], h.shape()));
    h = leaky_relu(conv2d(h, v[1], ConvGeom{1, 0}), 0.2);
    h = upsample2(h);
    const V score = sum(mul(sigmoid(flatten(h)), flatten(tanh(h))));
    const V gx = grad(score, Vs{x}, /*create_graph=*/true)[0];
    return sum(square(add_scalar(sqrt(reduce_samples(square(gx))), -1.0)));
  };
  expect_gradcheck(penalty, {rand_t(Shape{3, 2, 3, 3}, 81, 0.5), rand_t(Shape{2, 3, 1, 1}, 82),
                             rand_t(Shape{3}, 83)});
}

TEST_CASE("grad mode controls graph recording", "[autodiff]") {
  const V a = V::leaf(Tensor<double>(Shape{2}, 1.0));
  {
    NoGrad ng;
    CHECK_FALSE(square(a).requires_grad());
  }
  CHECK(square(a).requires_grad());
  const V c = V::constant(Tensor<double>(Shape{2}, 1.0));
  const auto g = grad(sum(square(a)), Vs{c});
  CHECK(g[0].value() == Tensor<double>(Shape{2}, 0.0));
}
