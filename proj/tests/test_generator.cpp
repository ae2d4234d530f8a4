// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "facedancer/discriminator.hpp"
#include "gradcheck.hpp"

using namespace facedancer;
using V = Var<double>;

namespace {

Tensor<double> randn(const Shape& s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return random_normal<double>(s, rng, sd);
}

ModelConfig tiny(const std::string& name) {
  ModelConfig c = preset(name, 64);
  c.base_channels = 4;
  c.channel_cap = 8;
  return c;
}

}  // namespace

TEST_CASE("mapping network", "[generator]") {
  ModelConfig c = tiny("configD");
  Generator<double> g(c, 1);
  const V zero = V::constant(Tensor<double>(Shape{2, 512}));
  const auto mapped = g.map_identity(zero).value();
  for (double v : mapped.span()) CHECK(v == 0.0);
  const V z = V::constant(randn(Shape{2, 512}, 2));
  CHECK(g.map_identity(z).value() == g.map_identity(z).value());
  CHECK_FALSE(g.map_identity(z).value() == z.value());
  Generator<double> e(tiny("configE"), 1);
  CHECK(e.map_identity(z).value() == z.value());
}

TEST_CASE("adain examples", "[generator]") {
  const Shape s{2, 3, 4, 5};
  const V h = V::constant(randn(s, 3, 2.0));
  const V ones = V::constant(Tensor<double>(Shape{2, 3}, 1.0));
  const V zeros = V::constant(Tensor<double>(Shape{2, 3}, 0.0));
  const auto out = adain_apply(h, ones, zeros).value();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double m = 0, v = 0;
      for (int i = 0; i < 20; ++i) m += out[(n * 3 + c) * 20 + i] / 20;
      for (int i = 0; i < 20; ++i) v += std::pow(out[(n * 3 + c) * 20 + i] - m, 2) / 20;
      CHECK(std::abs(m) < 1e-4);
      CHECK(v == Catch::Approx(1.0).margin(1e-4));
    }
  const V beta = V::constant(randn(Shape{2, 3}, 4));
  const auto flat = adain_apply(h, zeros, beta).value();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 20; ++i) CHECK(flat[(n * 3 + c) * 20 + i] == beta.value()[n * 3 + c]);
  const V gamma = V::constant(randn(Shape{2, 3}, 5));
  const auto a = adain_apply(h, gamma, beta).value();
  const auto b = adain_apply(scale(h, 5.0), gamma, beta).value();
  for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == Catch::Approx(b[i]).margin(1e-4));
}

TEST_CASE("affa gate arithmetic", "[generator]") {
  const Shape s{1, 2, 3, 3};
  const V h = V::constant(randn(s, 6)), z = V::constant(randn(s, 7));
  const V one = V::constant(Tensor<double>(s, 1.0)), zero = V::constant(Tensor<double>(s, 0.0));
  CHECK(affa_blend(h, z, one).value() == h.value());
  CHECK(affa_blend(h, z, zero).value() == z.value());
  const auto half = affa_blend(V::constant(Tensor<double>(s, 2.0)), V::constant(Tensor<double>(s, 4.0)),
                               V::constant(Tensor<double>(s, 0.5)));
  for (double v : half.value().span()) CHECK(v == 3.0);
  const V m = V::constant(randn(s, 8));
  const auto same = affa_blend(h, h, sigmoid(m)).value();
  for (std::int64_t i = 0; i < same.size(); ++i) CHECK(same[i] == Catch::Approx(h.value()[i]));

  Rng rng(1);
  ParamStore<double> ps;
  AffaModule<double> affa(Scope<double>{&ps, &rng, "affa"}, 2);
  V mask;
  affa(h, z, &mask);
  for (double v : mask.value().span()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
    CHECK(v == Catch::Approx(0.5).margin(0.05));
  }
  CHECK_THROWS_AS(affa(h, V::constant(randn(Shape{1, 2, 3, 4}, 9))), ShapeMismatch);
}

TEST_CASE("concat fusion", "[generator]") {
  Rng rng(2);
  ParamStore<double> ps;
  ConcatFuse<double> cf(Scope<double>{&ps, &rng, "cat"}, 2);
  CHECK(cf.conv.weight.shape() == Shape{2, 4, 3, 3});
  const Shape s{1, 2, 4, 4};
  const V h = V::constant(randn(s, 10)), z = V::constant(randn(s, 11));

  // Zeroing the z half of the kernel makes the output independent of z.
  auto& w = cf.conv.weight.mutable_value();
  for (int o = 0; o < 2; ++o)
    for (int i = 2; i < 4; ++i)
      for (int k = 0; k < 9; ++k) w[(o * 4 + i) * 9 + k] = 0.0;
  CHECK(cf(h, z).value() == cf(h, V::constant(Tensor<double>(s, 0.0))).value());

  // Swapping operands together with the kernel halves leaves the output unchanged.
  ConcatFuse<double> a(Scope<double>{&ps, &rng, "a"}, 2), b(Scope<double>{&ps, &rng, "b"}, 2);
  auto& wa = a.conv.weight.mutable_value();
  auto& wb = b.conv.weight.mutable_value();
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < 9; ++k) wb[(o * 4 + (i + 2) % 4) * 9 + k] = wa[(o * 4 + i) * 9 + k];
  b.conv.bias.mutable_value() = a.conv.bias.value();
  const auto ya = a(h, z).value(), yb = b(z, h).value();
  for (std::int64_t i = 0; i < ya.size(); ++i) CHECK(ya[i] == Catch::Approx(yb[i]).epsilon(1e-12));
  CHECK_THROWS_AS(cf(h, V::constant(randn(Shape{1, 2, 3, 4}, 12))), ShapeMismatch);
}

TEST_CASE("preset feature matrix", "[generator]") {
  using F = Fusion;
  const auto c = preset("configC");
  CHECK(c.fusion_plan == std::map<int, F>{{256, F::CONCAT}, {128, F::AFFA}, {64, F::AFFA},
                                          {32, F::AFFA}, {16, F::NONE}, {8, F::NONE}});
  const auto d = preset("configD");
  CHECK(d.fusion_plan.at(16) == F::AFFA);
  CHECK(d.fusion_plan.at(8) == F::AFFA);
  CHECK_FALSE(preset("configE").use_mapping);
  CHECK_FALSE(preset("configA").use_ifsr);
  CHECK(preset("configB").use_ifsr);
  CHECK(preset("baseline1").use_ifsr);
  CHECK(preset("baseline2").fusion_plan ==
        std::map<int, F>{{256, F::ADD}, {128, F::ADD}, {64, F::ADD}, {32, F::NONE}, {16, F::NONE},
                         {8, F::NONE}});
  const auto desk = preset("configC", 64);
  CHECK(desk.bottleneck_resolution == 2);
  CHECK(desk.fusion_plan.at(64) == F::CONCAT);
  CHECK(desk.fusion_plan.at(8) == F::AFFA);
  CHECK(desk.fusion_plan.at(4) == F::NONE);
  CHECK_THROWS_AS(preset("configZ"), UsageError);

  ModelConfig bad = c;
  bad.fusion_plan.erase(8);
  CHECK_THROWS_AS(bad.validate(), ConfigMismatch);
  bad = c;
  bad.fusion_plan[512] = F::NONE;
  CHECK_THROWS_AS(Generator<float>(bad, 1), ConfigMismatch);
  CHECK(model_config_from_json(to_json(d)) == d);
}

TEST_CASE("parameter counts follow the ablation columns", "[generator]") {
  for (int res : {64, 256}) {
    Generator<float> a(preset("configA", res), 1), b(preset("configB", res), 1);
    Generator<float> c(preset("configC", res), 1), d(preset("configD", res), 1);
    Generator<float> e(preset("configE", res), 1);
    CHECK(a.params().count() == b.params().count());
    REQUIRE(a.params().size() == b.params().size());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
      CHECK(a.params().named()[i].first == b.params().named()[i].first);
      CHECK(a.params().named()[i].second.shape() == b.params().named()[i].second.shape());
    }
    CHECK(d.params().count() > c.params().count());
    CHECK(e.params().count() < d.params().count());
  }
}

TEST_CASE("generator forward contract", "[generator]") {
  for (const auto& name : preset_names()) {
    Generator<float> g(preset(name, 64), 3);
    Rng rng(4);
    NoGrad ng;
    const auto x = Var<float>::constant(random_normal<float>(Shape{2, 3, 64, 64}, rng, 0.5));
    const auto z = Var<float>::constant(random_normal<float>(Shape{2, 512}, rng, 1.0));
    const auto out = g.forward(x, z);
    CHECK(out.image.shape() == x.shape());
    for (float v : out.image.value().span()) {
      REQUIRE(v >= -1.0f);
      REQUIRE(v <= 1.0f);
    }
    std::size_t n_affa = 0;
    for (const auto& [r, f] : g.config().fusion_plan) n_affa += f == Fusion::AFFA;
    CHECK(out.masks.size() == n_affa);
    for (const auto& [r, m] : out.masks)
      for (float v : m.value().span()) {
        REQUIRE(v > 0.0f);
        REQUIRE(v < 1.0f);
      }
    CHECK(g(x, z).value() == out.image.value());
    CHECK_THROWS_AS(g(Var<float>::constant(Tensor<float>(Shape{2, 3, 32, 32})), z),
                    ResolutionMismatch);
  }
}

TEST_CASE("generator gradients are finite for every parameter", "[generator]") {
  Generator<float> g(preset("configD", 64), 5);
  Rng rng(6);
  const auto x = Var<float>::constant(random_normal<float>(Shape{2, 3, 64, 64}, rng, 0.5));
  const auto z = Var<float>::constant(random_normal<float>(Shape{2, 512}, rng, 1.0));
  const auto loss = mean(square(g(x, z)));
  const auto params = g.params().vars();
  const auto grads = grad(loss, params);
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    INFO(g.params().named()[i].first);
    REQUIRE(grads[i].value().all_finite());
    for (float v : grads[i].value().span())
      if (v != 0.0f) {
        ++nonzero;
        break;
      }
  }
  CHECK(nonzero == grads.size());
}

TEST_CASE("tiny generator matches finite differences", "[generator]") {
  Generator<double> g(tiny("configD"), 7);
  const auto x = randn(Shape{1, 3, 64, 64}, 8, 0.5);
  const auto z = randn(Shape{1, 512}, 9);
  const std::vector<std::string> picks = {"dec8.affa.conv2.bias", "dec2.adain1.gamma.bias",
                                          "head.bias", "mapping.fc3.bias", "dec64.concat.conv.bias"};
  for (const auto& name : picks) {
    INFO(name);
    V p = g.params().at(name);
    const auto base = p.value();
    const V out = mean(square(g(V::constant(x), V::constant(z))));
    const auto analytic = grad(out, std::vector<V>{p})[0].value();
    for (std::int64_t i = 0; i < std::min<std::int64_t>(base.size(), 4); ++i) {
      auto probe = [&](double d) {
        p.mutable_value()[i] = base[i] + d;
        NoGrad ng;
        const double v = mean(square(g(V::constant(x), V::constant(z)))).item();
        p.mutable_value()[i] = base[i];
        return v;
      };
      const double numeric = (probe(1e-5) - probe(-1e-5)) / 2e-5;
      CHECK(analytic[i] == Catch::Approx(numeric).epsilon(1e-4).margin(1e-9));
    }
  }
}

TEST_CASE("critic contract", "[discriminator]") {
  Discriminator<float> d(preset("configC", 64), 1);
  CHECK(d.downsample_count() == 4);
  Rng rng(2);
  auto xt = random_normal<float>(Shape{3, 3, 64, 64}, rng, 0.5);
  std::copy(xt.data(), xt.data() + 3 * 64 * 64, xt.data() + 2 * 3 * 64 * 64);
  const auto x = Var<float>::leaf(xt);
  const auto s = d(x);
  REQUIRE(s.shape() == Shape{3});
  CHECK(s.value()[0] == s.value()[2]);
  CHECK(s.value().all_finite());
  const auto gx = grad(mean(s), std::vector<Var<float>>{x})[0];
  CHECK(gx.value().all_finite());
  CHECK_THROWS_AS(d(Var<float>::constant(Tensor<float>(Shape{1, 3, 32, 32}))), ResolutionMismatch);
}
