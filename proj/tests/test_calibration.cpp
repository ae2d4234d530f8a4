// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "facedancer/ifsr_calibration.hpp"
#include "facedancer/synthetic.hpp"

using namespace facedancer;

namespace {

const FaceStore& store() {
  static const FaceStore s = make_synthetic_store(4, 3, 32, 77);
  return s;
}

// Direct-count sweep over every candidate threshold.
double brute_force_eer(const std::vector<double>& g, const std::vector<double>& im) {
  std::vector<double> ts(g);
  ts.insert(ts.end(), im.begin(), im.end());
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  ts.push_back(std::numeric_limits<double>::infinity());
  std::vector<double> far, frr;
  for (double t : ts) {
    double a = 0, r = 0;
    for (double x : im) a += x < t;
    for (double x : g) r += x >= t;
    far.push_back(a / static_cast<double>(im.size()));
    frr.push_back(r / static_cast<double>(g.size()));
  }
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const double d = far[k] - frr[k];
    if (d < 0) continue;
    if (d == 0 || k == 0) return far[k];
    const double pd = far[k - 1] - frr[k - 1];
    return far[k - 1] + (-pd / (d - pd)) * (far[k] - far[k - 1]);
  }
  return 1.0;
}

}  // namespace

TEST_CASE("eer examples", "[calibration]") {
  CHECK(compute_eer({0.1, 0.1, 0.1}, {0.9, 0.9}) == 0.0);
  const std::vector<double> same{0.3, 0.1, 0.7, 0.7, 0.2};
  CHECK(compute_eer(same, same) == Catch::Approx(0.5).margin(1e-12));
  CHECK(compute_eer({0.5}, {0.5}) == Catch::Approx(0.5).margin(1e-12));
  CHECK(compute_eer({0.1, 0.3}, {0.2, 0.4}) == brute_force_eer({0.1, 0.3}, {0.2, 0.4}));
  CHECK(compute_eer({0.9}, {0.1}) == 1.0);
  CHECK_THROWS_AS(compute_eer({}, {0.1}), EmptyDistribution);
  CHECK_THROWS_AS(compute_eer({0.1}, {}), EmptyDistribution);
}

TEST_CASE("eer matches brute force", "[calibration]") {
  Rng rng(3);
  std::uniform_int_distribution<int> len(1, 50), coarse(0, 10);
  std::uniform_real_distribution<double> u(0, 2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> g(static_cast<std::size_t>(len(rng))), im(static_cast<std::size_t>(len(rng)));
    const bool ties = trial % 2 == 0;
    for (auto& x : g) x = ties ? coarse(rng) * 0.1 : u(rng) * 0.7;
    for (auto& x : im) x = ties ? coarse(rng) * 0.15 : 0.3 + u(rng) * 0.7;
    const double e = compute_eer(g, im);
    CHECK(e >= 0.0);
    CHECK(e <= 1.0);
    CHECK(std::abs(e - brute_force_eer(g, im)) <= 1e-9);
  }
  std::vector<double> g(300), im(300);
  for (auto& x : g) x = u(rng) * 0.15;
  for (auto& x : im) x = 0.6 + u(rng) * 0.2;
  CHECK(compute_eer(g, im) == 0.0);
}

TEST_CASE("margins from samples", "[calibration]") {
  std::vector<DistanceSample> s{{3, 0.4, 0.9, 1.0}, {3, 0.4, 0.8, 1.0}};
  CHECK(derive_margins(s, "m", "b").at(3) == Catch::Approx(0.4));
  s = {{3, 0.2, 0, 0}, {3, 0.6, 0, 0}, {4, 0.1, 0, 0}};
  const auto m = derive_margins(s, "m", "b");
  CHECK(m.at(3) == Catch::Approx(0.4));
  CHECK(m.at(4) == Catch::Approx(0.1));
  CHECK(m.n_samples.at(3) == 2);
  CHECK_THROWS_AS(derive_margins(s, 2, 4, "m", "b"), EmptyBlock);
  CHECK_THROWS_AS(derive_margins({}, "m", "b"), EmptyBlock);
}

TEST_CASE("pass-through swap models", "[calibration]") {
  const StubBackbone<float> bb;
  const auto before = bb.checksum();
  const auto ident = collect_distances(identity_passthrough_model(), bb, store(), 12, 5);
  REQUIRE(ident.size() == 12u * 8u);
  for (const auto& d : ident) CHECK(d.c2t == 0.0);
  const auto m = derive_margins(ident, "identity-passthrough", bb.id());
  for (const auto& [b, v] : m.margins) CHECK(std::abs(v) <= 1e-7);
  const auto src = collect_distances(source_passthrough_model(), bb, store(), 12, 5);
  for (const auto& d : src) {
    CHECK(d.c2s == 0.0);
    CHECK(d.neg > 0.0);
  }
  CHECK(bb.checksum() == before);

  // Determinism, and independence from the evaluation batch size.
  CollectOptions o;
  o.batch_size = 5;
  CHECK(collect_distances(source_passthrough_model(), bb, store(), 12, 5, o) == src);
  CHECK(collect_distances(source_passthrough_model(), bb, store(), 12, 6) != src);

  const FaceStore two = make_synthetic_store(2, 2, 32, 1);
  CHECK_THROWS_AS(collect_distances(identity_passthrough_model(), bb, two, 4, 1), InsufficientIdentities);
}

TEST_CASE("generator swap model and report output", "[calibration]") {
  auto bb = std::make_shared<StubBackbone<float>>();
  auto gen = std::make_shared<Generator<float>>(preset("configA", 64), 3);
  const FaceStore s64 = make_synthetic_store(4, 2, 64, 78);
  const auto model = generator_swap_model(gen, bb, "gen-test");
  CollectOptions o;
  o.first_block = 2;
  o.last_block = 7;
  const auto samples = collect_distances(model, *bb, s64, 6, 9, o);
  REQUIRE(samples.size() == 36u);
  for (const auto& d : samples) {
    CHECK(d.block_index >= 2);
    CHECK(d.block_index <= 7);
    CHECK(std::isfinite(d.c2t));
  }
  const auto m = derive_margins(samples, model.id, bb->id());
  CHECK(m.first() == 2);
  CHECK(m.last() == 7);
  const auto eer = compute_eer_curve(samples);
  const auto dir = std::filesystem::temp_directory_path() / "facedancer_calib";
  std::filesystem::remove_all(dir);
  const auto rep = emit_report(samples, m, eer, dir / "report.json", dir / "margins.tsv");
  CHECK(rep.blocks.size() == 6u);
  CHECK(read_margins(dir / "margins.tsv") == m);
  const auto back = read_calibration_report(dir / "report.json");
  CHECK(back == rep);
  CHECK(back.eer_curve() == eer);
  for (const auto& b : back.blocks) {
    CHECK(b.hist_c2t.size() == 50u);
    std::int64_t n = 0;
    for (auto c : b.hist_c2t) n += c;
    CHECK(n == b.n);
  }
  IFSRMargins partial = m;
  partial.margins.erase(7);
  CHECK_THROWS_AS(emit_report(samples, partial, eer, dir / "r2.json", dir / "m2.tsv"), ShapeMismatch);
}
