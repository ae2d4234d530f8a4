// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: identity retrieval, pose and expression L2 error, and
// Frechet distance between Gaussian fits of image features.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "facedancer/identity_backbone.hpp"
#include "facedancer/image_io.hpp"
#include "facedancer/perceptual.hpp"

namespace facedancer {

// ---------------------------------------------------------------------------
// Identity retrieval

// Fraction of queries whose most cosine-similar gallery entry carries the
// query's true identity. Ties go to the lexicographically first identity.
inline double identity_retrieval(const std::vector<std::vector<float>>& queries,
                                 const std::vector<std::string>& true_ids,
                                 const std::map<std::string, std::vector<float>>& gallery) {
  if (gallery.empty()) throw EmptyGallery("identity gallery is empty");
  if (queries.size() != true_ids.size()) throw ShapeMismatch("queries and labels differ in count");
  if (queries.empty()) throw EmptyDataset("no queries for identity retrieval");
  for (const auto& id : true_ids)
    if (!gallery.count(id)) throw EmptyGallery("gallery has no entry for identity " + id);
  std::size_t hits = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    double best = -2;
    const std::string* arg = nullptr;
    for (const auto& [id, g] : gallery) {
      const double sim = 1.0 - cosine_distance(queries[q], g);
      if (sim > best) {
        best = sim;
        arg = &id;
      }
    }
    hits += *arg == true_ids[q];
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

template <typename T>
double identity_retrieval(const std::vector<AlignedFace>& swapped, const std::vector<std::string>& true_ids,
                          const std::map<std::string, AlignedFace>& gallery,
                          const BackboneAdapter<T>& encoder) {
  std::map<std::string, std::vector<float>> g;
  for (const auto& [id, face] : gallery) {
    const auto e = encoder.embed(face);
    g[id] = e.vec();
  }
  std::vector<std::vector<float>> q;
  for (const auto& f : swapped) q.push_back(encoder.embed(f).vec());
  return identity_retrieval(q, true_ids, g);
}

// ---------------------------------------------------------------------------
// Pose / expression

// Mean Euclidean distance between paired estimate vectors.
inline double pairwise_l2_metric(const std::vector<std::vector<double>>& a,
                                 const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) throw ShapeMismatch("estimate lists differ in length");
  if (a.empty()) throw EmptyDataset("no estimates to compare");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) throw ShapeMismatch("estimate vectors differ in dimension");
    double s = 0;
    for (std::size_t k = 0; k < a[i].size(); ++k) s += (a[i][k] - b[i][k]) * (a[i][k] - b[i][k]);
    acc += std::sqrt(s);
  }
  return acc / static_cast<double>(a.size());
}

// Opaque fixed-dimension estimate per face (head pose, expression code, ...).
class EstimatorAdapter {
 public:
  virtual ~EstimatorAdapter() = default;
  virtual std::string id() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::vector<double> estimate(const AlignedFace& face) const = 0;
};

// Seeded random projection of an 8x8 grayscale thumbnail. Deterministic in
// the image content, so identical images give identical estimates.
class StubEstimator final : public EstimatorAdapter {
 public:
  StubEstimator(std::string kind, std::size_t dim, std::uint64_t seed)
      : kind_(std::move(kind)), seed_(seed), proj_(static_cast<Eigen::Index>(dim), 64) {
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, 1.0 / 8.0);
    for (Eigen::Index i = 0; i < proj_.size(); ++i) proj_.data()[i] = n(rng);
  }

  static std::shared_ptr<StubEstimator> pose() { return std::make_shared<StubEstimator>("pose", 3, 101); }
  static std::shared_ptr<StubEstimator> expression() {
    return std::make_shared<StubEstimator>("expression", 16, 202);
  }

  std::string id() const override { return "stub-" + kind_ + "-" + std::to_string(seed_); }
  std::size_t dim() const override { return static_cast<std::size_t>(proj_.rows()); }

  std::vector<double> estimate(const AlignedFace& face) const override {
    const auto& px = face.pixels;
    const std::int64_t r = face.resolution;
    Eigen::VectorXd thumb = Eigen::VectorXd::Zero(64);
    Eigen::VectorXd count = Eigen::VectorXd::Zero(64);
    for (std::int64_t y = 0; y < r; ++y)
      for (std::int64_t x = 0; x < r; ++x) {
        const Eigen::Index k = static_cast<Eigen::Index>((y * 8 / r) * 8 + x * 8 / r);
        double g = 0;
        for (std::int64_t c = 0; c < 3; ++c) g += px[(c * r + y) * r + x];
        thumb[k] += g / 3.0;
        count[k] += 1;
      }
    thumb = thumb.cwiseQuotient(count);
    const Eigen::VectorXd e = proj_ * thumb;
    return {e.data(), e.data() + e.size()};
  }

 private:
  std::string kind_;
  std::uint64_t seed_;
  Eigen::MatrixXd proj_;
};

// ---------------------------------------------------------------------------
// Frechet distance

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

// Sample mean and unbiased covariance of the rows.
inline GaussianStats gaussian_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw EmptyDistribution("Gaussian fit needs at least two rows");
  GaussianStats s;
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd c = features.rowwise() - s.mean.transpose();
  s.covariance = (c.transpose() * c) / static_cast<double>(features.rows() - 1);
  s.covariance = 0.5 * (s.covariance + s.covariance.transpose());
  return s;
}

namespace detail {

inline void check_psd(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es, const char* what) {
  const auto& ev = es.eigenvalues();
  if (ev.size() == 0) return;
  const double lmin = ev.minCoeff(), lmax = ev.cwiseAbs().maxCoeff();
  if (lmin < -1e-6 * std::max(1.0, lmax))
    throw NonPSDCovariance(std::string(what) + " is not positive semidefinite (min eigenvalue " +
                           std::to_string(lmin) + ")");
}

inline Eigen::MatrixXd eigen_sqrt(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es) {
  const Eigen::VectorXd r = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * r.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

inline double sqrtm_residual(const Eigen::MatrixXd& root, const Eigen::MatrixXd& m) {
  const double n = m.norm();
  return n == 0 ? (root * root).norm() : (root * root - m).norm() / n;
}

// Principal square root of a symmetric PSD matrix. Coupled Newton-Schulz
// iteration, falling back to an eigendecomposition when it stalls.
inline Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m, bool* used_fallback = nullptr) {
  if (m.rows() != m.cols()) throw ShapeMismatch("sqrtm of a non-square matrix");
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  detail::check_psd(es, "matrix");
  if (used_fallback) *used_fallback = false;
  const double norm = sym.norm();
  if (norm == 0) return Eigen::MatrixXd::Zero(m.rows(), m.cols());

  const Eigen::Index d = m.rows();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd y = sym / norm, z = I;
  for (int it = 0; it < 60; ++it) {
    const Eigen::MatrixXd t = 0.5 * (3.0 * I - z * y);
    y = y * t;
    z = t * z;
    if ((y * y - sym / norm).norm() < 1e-13) break;
  }
  Eigen::MatrixXd root = y * std::sqrt(norm);
  root = 0.5 * (root + root.transpose());
  if (!root.allFinite() || sqrtm_residual(root, sym) > 1e-9) {
    if (used_fallback) *used_fallback = true;
    root = detail::eigen_sqrt(es);
  }
  return root;
}

// ||mu_p - mu_q||^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2)). The trace of the
// cross term is taken as tr((S_p^(1/2) S_q S_p^(1/2))^(1/2)), which is equal
// and keeps every root symmetric.
inline double frechet_distance(const GaussianStats& p, const GaussianStats& q) {
  if (p.mean.size() != q.mean.size() || p.covariance.rows() != q.covariance.rows())
    throw ShapeMismatch("Gaussian statistics differ in dimension");
  for (const auto* s : {&p, &q})
    if ((s->covariance - s->covariance.transpose()).cwiseAbs().maxCoeff() >
        1e-8 * std::max(1.0, s->covariance.cwiseAbs().maxCoeff()))
      throw NonPSDCovariance("covariance is not symmetric");
  detail::check_psd(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(q.covariance), "covariance");
  const Eigen::MatrixXd a = sqrtm_psd(p.covariance);
  const Eigen::MatrixXd inner = a * q.covariance * a;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()),
                                                          Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (p.mean - q.mean).squaredNorm() + p.covariance.trace() + q.covariance.trace() - 2 * cross;
  return std::max(d, 0.0);
}

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
  static constexpr int kSchemaVersion = 1;
  std::optional<double> id_retrieval, pose_l2, expression_l2, fid;
  std::int64_t n_images = 0;
  std::map<std::string, std::string> adapters;  // metric -> adapter id

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", "metric_report"}, {"schema_version", kSchemaVersion},
                     {"n_images", n_images},    {"adapters", adapters}};
    nlohmann::json absent = nlohmann::json::array();
    auto put = [&](const char* k, const std::optional<double>& v) {
      if (v) {
        j[k] = *v;
      } else {
        j[k] = nullptr;
        absent.push_back(k);
      }
    };
    put("id_retrieval", id_retrieval);
    put("pose_l2", pose_l2);
    put("expression_l2", expression_l2);
    put("fid", fid);
    j["absent"] = absent;
    return j;
  }

  static MetricReport from_json(const nlohmann::json& j) {
    try {
      if (j.at("kind") != "metric_report") throw ParseError("not a metric report");
      if (j.at("schema_version").get<int>() != kSchemaVersion) throw ParseError("unsupported report schema");
      MetricReport r;
      r.n_images = j.at("n_images");
      r.adapters = j.at("adapters").get<std::map<std::string, std::string>>();
      auto get = [&](const char* k) -> std::optional<double> {
        const auto& v = j.at(k);
        if (v.is_null()) return std::nullopt;
        return v.get<double>();
      };
      r.id_retrieval = get("id_retrieval");
      r.pose_l2 = get("pose_l2");
      r.expression_l2 = get("expression_l2");
      r.fid = get("fid");
      return r;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed metric report: ") + e.what());
    }
  }

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline void write_metric_report(const std::filesystem::path& path, const MetricReport& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw ImageIOError("cannot write " + tmp);
    f << r.to_json().dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

inline MetricReport read_metric_report(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FileNotFound("no such report: " + path.string());
  try {
    return MetricReport::from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("report is not JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Directory evaluation
//
// Swapped images pair with reference images through `manifest.tsv` in the
// swapped directory (columns: swapped path, reference path, source identity;
// paths relative to their directories). Without a manifest, files pair by
// identical relative path and the source identity is the first path component.
// Gallery layout: <identity>/<image>, first image per identity in sort order.

struct EvalAdapters {
  std::shared_ptr<const BackboneAdapter<float>> identity;
  std::shared_ptr<const EstimatorAdapter> pose, expression;
  std::shared_ptr<const PerceptualAdapter<float>> fid;
};

struct EvalPair {
  std::filesystem::path swapped, reference;
  std::string source_id;
};

inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw FileNotFound("no such directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(fs::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<EvalPair> eval_pairs(const std::filesystem::path& swapped_dir,
                                        const std::filesystem::path& reference_dir) {
  namespace fs = std::filesystem;
  std::vector<EvalPair> pairs;
  const auto manifest = swapped_dir / "manifest.tsv";
  if (fs::exists(manifest)) {
    std::ifstream f(manifest);
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream row(line);
      EvalPair p;
      std::string a, b;
      if (!std::getline(row, a, '\t') || !std::getline(row, b, '\t') || !std::getline(row, p.source_id))
        throw ParseError("bad manifest row: " + line);
      p.swapped = a;
      p.reference = b;
      pairs.push_back(std::move(p));
    }
  } else {
    for (const auto& rel : list_images(swapped_dir)) {
      EvalPair p{rel, rel, rel.begin()->string()};
      if (!fs::exists(reference_dir / rel))
        throw FileNotFound("no reference image for " + rel.string());
      pairs.push_back(std::move(p));
    }
  }
  if (pairs.empty()) throw EmptyDataset("no swapped images under " + swapped_dir.string());
  return pairs;
}

inline Eigen::MatrixXd pooled_feature_matrix(const PerceptualAdapter<float>& fx,
                                             const std::vector<AlignedFace>& faces) {
  NoGrad ng;
  std::vector<Tensor<float>> rows;
  for (std::size_t b = 0; b < faces.size(); b += 16) {
    const std::size_t e = std::min(faces.size(), b + 16);
    const auto x = to_batch<float>(std::span<const AlignedFace>(faces.data() + b, e - b));
    rows.push_back(fx.pooled_features(Var<float>::constant(x)).value());
  }
  const Eigen::Index d = static_cast<Eigen::Index>(rows.front().dim(1));
  Eigen::MatrixXd m(static_cast<Eigen::Index>(faces.size()), d);
  Eigen::Index r = 0;
  for (const auto& t : rows)
    for (std::int64_t i = 0; i < t.dim(0); ++i, ++r)
      for (Eigen::Index k = 0; k < d; ++k) m(r, k) = t[i * d + k];
  return m;
}

inline MetricReport evaluate(const std::filesystem::path& swapped_dir,
                             const std::filesystem::path& reference_dir,
                             const std::optional<std::filesystem::path>& gallery_dir,
                             const EvalAdapters& adapters, std::int64_t resolution) {
  const auto pairs = eval_pairs(swapped_dir, reference_dir);
  std::vector<AlignedFace> sw, ref;
  std::vector<std::string> ids;
  for (const auto& p : pairs) {
    sw.push_back(from_prealigned(read_image(swapped_dir / p.swapped), resolution, p.source_id));
    ref.push_back(from_prealigned(read_image(reference_dir / p.reference), resolution));
    ids.push_back(p.source_id);
  }
  MetricReport r;
  r.n_images = static_cast<std::int64_t>(pairs.size());

  if (adapters.identity && gallery_dir) {
    std::map<std::string, AlignedFace> gallery;
    for (const auto& rel : list_images(*gallery_dir)) {
      const std::string id = rel.begin()->string();
      if (!gallery.count(id)) gallery.emplace(id, from_prealigned(read_image(*gallery_dir / rel), resolution, id));
    }
    r.id_retrieval = identity_retrieval(sw, ids, gallery, *adapters.identity);
    r.adapters["id_retrieval"] = adapters.identity->id();
  }
  auto l2 = [&](const EstimatorAdapter& est) {
    std::vector<std::vector<double>> a, b;
    for (std::size_t i = 0; i < sw.size(); ++i) {
      a.push_back(est.estimate(sw[i]));
      b.push_back(est.estimate(ref[i]));
    }
    return pairwise_l2_metric(a, b);
  };
  if (adapters.pose) {
    r.pose_l2 = l2(*adapters.pose);
    r.adapters["pose_l2"] = adapters.pose->id();
  }
  if (adapters.expression) {
    r.expression_l2 = l2(*adapters.expression);
    r.adapters["expression_l2"] = adapters.expression->id();
  }
  if (adapters.fid) {
    // Swapped set against the unaltered reference set.
    std::vector<AlignedFace> all_ref;
    for (const auto& rel : list_images(reference_dir))
      all_ref.push_back(from_prealigned(read_image(reference_dir / rel), resolution));
    r.fid = frechet_distance(gaussian_stats(pooled_feature_matrix(*adapters.fid, sw)),
                             gaussian_stats(pooled_feature_matrix(*adapters.fid, all_ref)));
    r.adapters["fid"] = adapters.fid->id();
  }
  return r;
}

}  // namespace facedancer
