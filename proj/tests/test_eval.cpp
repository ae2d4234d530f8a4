// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "facedancer/eval_suite.hpp"
#include "facedancer/synthetic.hpp"

using namespace facedancer;

namespace {

Eigen::MatrixXd random_psd(Eigen::Index d, Rng& rng, Eigen::Index rank = -1) {
  std::normal_distribution<double> n(0, 1);
  const Eigen::Index k = rank < 0 ? d : rank;
  Eigen::MatrixXd a(d, k);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  Eigen::MatrixXd s = a * a.transpose() / static_cast<double>(k);
  return 0.5 * (s + s.transpose());
}

GaussianStats random_stats(Eigen::Index d, Rng& rng) {
  std::normal_distribution<double> n(0, 1);
  GaussianStats s;
  s.mean = Eigen::VectorXd(d);
  for (Eigen::Index i = 0; i < d; ++i) s.mean[i] = n(rng);
  s.covariance = random_psd(d, rng);
  return s;
}

}  // namespace

TEST_CASE("identity retrieval", "[eval]") {
  std::map<std::string, std::vector<float>> g{{"a", {1, 0, 0}}, {"b", {0, 1, 0}}, {"c", {0, 0, 1}}};
  CHECK(identity_retrieval({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, {"a", "b", "c"}, g) == 1.0);
  CHECK(identity_retrieval({{5, 0.1f, 0}, {0.2f, 3, 0}}, {"a", "b"}, g) == 1.0);
  CHECK(identity_retrieval({{0.3f, -1, 2}}, {"a"}, {{"a", {1, 1, 1}}}) == 1.0);
  CHECK_THROWS_AS(identity_retrieval({{1, 0, 0}}, {"a"}, {}), EmptyGallery);

  // Ten orthogonal identities: small noise keeps every hit, random queries
  // land on the right identity about a tenth of the time.
  Rng rng(11);
  std::normal_distribution<float> n(0, 1);
  std::map<std::string, std::vector<float>> ten;
  for (int i = 0; i < 10; ++i) {
    std::vector<float> e(64, 0);
    e[static_cast<std::size_t>(i)] = 1;
    ten["id" + std::to_string(i)] = e;
  }
  std::vector<std::vector<float>> near, rnd;
  std::vector<std::string> truth;
  for (int t = 0; t < 1000; ++t) {
    const int i = t % 10;
    std::vector<float> q = ten["id" + std::to_string(i)], r(64);
    for (auto& v : q) v += 0.05f * n(rng);
    for (auto& v : r) v = n(rng);
    near.push_back(q);
    rnd.push_back(r);
    truth.push_back("id" + std::to_string(i));
  }
  CHECK(identity_retrieval(near, truth, ten) == 1.0);
  CHECK(identity_retrieval(rnd, truth, ten) == Catch::Approx(0.1).margin(0.03));

  // Positive rescaling of any embedding changes nothing.
  auto scaled = rnd;
  for (std::size_t k = 0; k < scaled.size(); ++k)
    for (auto& v : scaled[k]) v *= static_cast<float>(1 + k % 7);
  auto ten_scaled = ten;
  for (auto& [id, e] : ten_scaled)
    for (auto& v : e) v *= 3.5f;
  CHECK(identity_retrieval(scaled, truth, ten_scaled) == identity_retrieval(rnd, truth, ten));
}

TEST_CASE("pairwise l2", "[eval]") {
  const std::vector<std::vector<double>> a{{1, 2, 3, 4}, {0, 0, 0, 0}};
  CHECK(pairwise_l2_metric(a, a) == 0.0);
  auto b = a;
  for (auto& v : b) {
    v[0] += 3;
    v[1] += 4;
  }
  CHECK(pairwise_l2_metric(a, b) == Catch::Approx(5.0));
  CHECK(pairwise_l2_metric({{0, 0}}, {{1, 1}}) == Catch::Approx(std::sqrt(2.0)));
  CHECK_THROWS_AS(pairwise_l2_metric(a, {{1}}), ShapeMismatch);
}

TEST_CASE("gaussian stats", "[eval]") {
  Eigen::MatrixXd same(4, 3);
  same.rowwise() = Eigen::RowVector3d(1, 2, 3);
  CHECK(gaussian_stats(same).covariance.norm() == 0.0);
  Eigen::MatrixXd two(2, 2);
  two << 0, 0, 2, 0;
  const auto s = gaussian_stats(two);
  CHECK(s.mean.isApprox(Eigen::Vector2d(1, 0)));
  Eigen::Matrix2d c;
  c << 2, 0, 0, 0;
  CHECK(s.covariance.isApprox(c));
  Rng rng(2);
  std::normal_distribution<double> n(0, 1);
  Eigen::MatrixXd f(9, 4);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = n(rng);
  Eigen::MatrixXd g = f;
  g.row(0).swap(g.row(5));
  g.row(2).swap(g.row(8));
  CHECK((gaussian_stats(f).covariance - gaussian_stats(g).covariance).norm() < 1e-12);
  CHECK_THROWS_AS(gaussian_stats(Eigen::MatrixXd(1, 3)), EmptyDistribution);
}

TEST_CASE("frechet distance oracles", "[eval]") {
  Rng rng(7);
  std::uniform_real_distribution<double> u(-2, 2), sd(0.01, 3);
  for (int t = 0; t < 100; ++t) {
    GaussianStats p, q;
    const double m1 = u(rng), m2 = u(rng), s1 = sd(rng), s2 = sd(rng);
    p.mean = Eigen::VectorXd::Constant(1, m1);
    q.mean = Eigen::VectorXd::Constant(1, m2);
    p.covariance = Eigen::MatrixXd::Constant(1, 1, s1 * s1);
    q.covariance = Eigen::MatrixXd::Constant(1, 1, s2 * s2);
    const double want = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
    CHECK(std::abs(frechet_distance(p, q) - want) < 1e-5);

    const Eigen::Index d = 1 + t % 8;
    GaussianStats dp, dq;
    dp.mean = Eigen::VectorXd(d);
    dq.mean = Eigen::VectorXd(d);
    dp.covariance = Eigen::MatrixXd::Zero(d, d);
    dq.covariance = Eigen::MatrixXd::Zero(d, d);
    double dwant = 0;
    for (Eigen::Index k = 0; k < d; ++k) {
      dp.mean[k] = u(rng);
      dq.mean[k] = u(rng);
      const double a = sd(rng), b = sd(rng);
      dp.covariance(k, k) = a * a;
      dq.covariance(k, k) = b * b;
      dwant += (dp.mean[k] - dq.mean[k]) * (dp.mean[k] - dq.mean[k]) + (a - b) * (a - b);
    }
    CHECK(std::abs(frechet_distance(dp, dq) - dwant) < 1e-5);
  }
}

TEST_CASE("frechet distance properties and sqrtm", "[eval]") {
  Rng rng(8);
  for (Eigen::Index d : {1, 2, 5, 16, 33, 64}) {
    const auto p = random_stats(d, rng), q = random_stats(d, rng);
    CHECK(std::abs(frechet_distance(p, q) - frechet_distance(q, p)) < 1e-6);
    CHECK(frechet_distance(p, p) < 1e-6);
    for (Eigen::Index rank : {d, std::max<Eigen::Index>(1, d / 2)}) {
      const auto m = random_psd(d, rng, rank);
      CHECK(sqrtm_residual(sqrtm_psd(m), m) < 1e-5);
    }
  }
  bool fb = false;
  const Eigen::MatrixXd wellcond = random_psd(8, rng) + Eigen::MatrixXd::Identity(8, 8);
  sqrtm_psd(wellcond, &fb);
  CHECK_FALSE(fb);

  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(3, 3);
  bad(2, 2) = -0.5;
  CHECK_THROWS_AS(sqrtm_psd(bad), NonPSDCovariance);
  GaussianStats p{Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3)}, q{Eigen::VectorXd::Zero(3), bad};
  CHECK_THROWS_AS(frechet_distance(p, q), NonPSDCovariance);
  CHECK_THROWS_AS(frechet_distance(q, p), NonPSDCovariance);
  Eigen::MatrixXd tiny = Eigen::MatrixXd::Identity(3, 3);
  tiny(2, 2) = -1e-9;
  CHECK_NOTHROW(sqrtm_psd(tiny));
}

TEST_CASE("metric report and directory evaluation", "[eval]") {
  namespace fs = std::filesystem;
  const auto root = fs::temp_directory_path() / "facedancer_eval";
  fs::remove_all(root);
  write_synthetic_dataset(root / "ref", 4, 3, 32, 21, false);
  write_synthetic_dataset(root / "gallery", 4, 1, 32, 21, false);

  EvalAdapters ad;
  ad.identity = std::make_shared<StubBackbone<float>>();
  ad.pose = StubEstimator::pose();
  ad.expression = StubEstimator::expression();
  ad.fid = std::make_shared<StubPerceptual<float>>();
  const auto self = evaluate(root / "ref", root / "ref", root / "gallery", ad, 32);
  CHECK(self.n_images == 12);
  REQUIRE(self.fid);
  CHECK(*self.fid < 1e-6);
  CHECK(*self.pose_l2 == 0.0);
  CHECK(*self.expression_l2 == 0.0);
  REQUIRE(self.id_retrieval);
  CHECK(*self.id_retrieval >= 0.0);
  CHECK(*self.id_retrieval <= 1.0);

  EvalAdapters partial = ad;
  partial.pose = nullptr;
  const auto r = evaluate(root / "ref", root / "ref", std::nullopt, partial, 32);
  CHECK_FALSE(r.pose_l2.has_value());
  CHECK_FALSE(r.id_retrieval.has_value());
  const auto j = r.to_json();
  CHECK(j["pose_l2"].is_null());
  CHECK(std::find(j["absent"].begin(), j["absent"].end(), "pose_l2") != j["absent"].end());
  write_metric_report(root / "report.json", r);
  CHECK(read_metric_report(root / "report.json") == r);
  write_metric_report(root / "self.json", self);
  CHECK(read_metric_report(root / "self.json") == self);

  // Swapped set differing from the reference moves every metric.
  fs::create_directories(root / "swapped");
  {
    std::ofstream m(root / "swapped" / "manifest.tsv");
    int k = 0;
    for (const auto& rel : list_images(root / "ref")) {
      Tensor<float> img = read_image(root / "ref" / rel);
      for (auto& v : img.span()) v = 1.0f - v;
      const std::string name = "s" + std::to_string(k++) + ".png";
      write_image(root / "swapped" / name, img, 0.0f, 1.0f);
      m << name << '\t' << rel.string() << '\t' << rel.begin()->string() << '\n';
    }
  }
  const auto sw = evaluate(root / "swapped", root / "ref", root / "gallery", ad, 32);
  CHECK(*sw.fid > 0.0);
  CHECK(*sw.pose_l2 > 0.0);
  CHECK_THROWS_AS(evaluate(root / "nope", root / "ref", std::nullopt, ad, 32), FileNotFound);
}
