// SPDX-License-Identifier: Apache-2.0
//
// Face alignment, photometric augmentation and training-pair sampling.
#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "facedancer/image_io.hpp"
#include "facedancer/nn.hpp"

namespace facedancer {

// Five facial landmarks in pixel coordinates: left eye, right eye, nose tip,
// left mouth corner, right mouth corner. Pixel (row y, col x) has its center at (x, y).
struct LandmarkSet {
  std::array<Eigen::Vector2d, 5> points;

  void validate() const {
    for (const auto& p : points)
      if (!p.allFinite()) throw DegenerateLandmarks("landmark coordinates must be finite");
  }
  Eigen::Matrix<double, 2, 5> matrix() const {
    Eigen::Matrix<double, 2, 5> m;
    for (int i = 0; i < 5; ++i) m.col(i) = points[static_cast<std::size_t>(i)];
    return m;
  }
};

// Landmark template in a square reference frame of side `resolution`.
struct FaceTemplate {
  LandmarkSet landmarks;
  double resolution = 112.0;

  FaceTemplate scaled_to(double out_resolution) const {
    FaceTemplate t = *this;
    const double s = out_resolution / resolution;
    for (auto& p : t.landmarks.points) p *= s;
    t.resolution = out_resolution;
    return t;
  }
};

// Canonical 112x112 ArcFace alignment template.
inline FaceTemplate arcface_template() {
  FaceTemplate t;
  t.landmarks.points = {Eigen::Vector2d(38.2946, 51.6963), Eigen::Vector2d(73.5318, 51.5014),
                        Eigen::Vector2d(56.0252, 71.7366), Eigen::Vector2d(41.5493, 92.3655),
                        Eigen::Vector2d(70.7299, 92.2041)};
  t.resolution = 112.0;
  return t;
}

using AffineMatrix = Eigen::Matrix<double, 2, 3>;

// Least-squares similarity (rotation, uniform scale, translation) mapping
// `detected` onto `target` (closed-form Umeyama fit).
inline AffineMatrix estimate_similarity_transform(const LandmarkSet& detected,
                                                  const LandmarkSet& target) {
  detected.validate();
  target.validate();
  const Eigen::Matrix<double, 2, 5> src = detected.matrix();
  const Eigen::Matrix<double, 2, 5> centered = src.colwise() - src.rowwise().mean();
  const Eigen::JacobiSVD<Eigen::Matrix<double, 2, 5>> svd(centered);
  const auto sv = svd.singularValues();
  if (sv(0) <= 1e-8 || sv(1) <= 1e-8 * sv(0))
    throw DegenerateLandmarks("detected landmarks are collinear or coincident");
  const Eigen::Matrix3d h = Eigen::umeyama(src, target.matrix(), true);
  return h.topRows<2>();
}

inline AffineMatrix invert_similarity(const AffineMatrix& m) {
  Eigen::Matrix3d h = Eigen::Matrix3d::Identity();
  h.topRows<2>() = m;
  return h.inverse().topRows<2>();
}

struct AlignedFace {
  Tensor<float> pixels;  // (3, R, R), values in [-1, 1]
  std::int64_t resolution = 0;
  std::string source_id;

  void validate() const {
    if (pixels.rank() != 3 || pixels.dim(0) != 3 || pixels.dim(1) != pixels.dim(2) ||
        pixels.dim(1) != resolution)
      throw ShapeMismatch("aligned face must be (3, R, R) with R = " + std::to_string(resolution) +
                          ", got " + to_string(pixels.shape()));
    for (float v : pixels.span())
      if (!(v >= -1.0f && v <= 1.0f)) throw ShapeMismatch("aligned face pixel outside [-1, 1]");
  }
};

namespace detail {
// Reflects a continuous coordinate into [0, n - 1] (mirror about the edge pixels).
inline double reflect_coord(double x, std::int64_t n) {
  if (n <= 1) return 0.0;
  const double period = 2.0 * static_cast<double>(n - 1);
  x = std::fmod(std::abs(x), period);
  return x > static_cast<double>(n - 1) ? period - x : x;
}
}  // namespace detail

// Samples `image` (3, H, W) at output pixel centers mapped through `out_to_src`,
// bilinearly, with reflect padding at the borders.
inline Tensor<float> warp_affine(const Tensor<float>& image, const AffineMatrix& out_to_src,
                                 std::int64_t out_resolution) {
  const std::int64_t h = image.dim(1), w = image.dim(2), r = out_resolution;
  Tensor<float> out(Shape{3, r, r});
  for (std::int64_t v = 0; v < r; ++v)
    for (std::int64_t u = 0; u < r; ++u) {
      const Eigen::Vector2d p = out_to_src * Eigen::Vector3d(static_cast<double>(u),
                                                             static_cast<double>(v), 1.0);
      const double sx = detail::reflect_coord(p.x(), w), sy = detail::reflect_coord(p.y(), h);
      const std::int64_t x0 = std::min<std::int64_t>(static_cast<std::int64_t>(sx), w - 1);
      const std::int64_t y0 = std::min<std::int64_t>(static_cast<std::int64_t>(sy), h - 1);
      const std::int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::int64_t c = 0; c < 3; ++c) {
        const float* pl = image.data() + c * h * w;
        const double val = (1 - fy) * ((1 - fx) * pl[y0 * w + x0] + fx * pl[y0 * w + x1]) +
                           fy * ((1 - fx) * pl[y1 * w + x0] + fx * pl[y1 * w + x1]);
        out[(c * r + v) * r + u] = static_cast<float>(val);
      }
    }
  return out;
}

inline Tensor<float> unit_to_signed(Tensor<float> t) {
  for (auto& v : t.span()) v = std::clamp(v * 2.0f - 1.0f, -1.0f, 1.0f);
  return t;
}

// Warps an RGB image in [0, 1] onto the template geometry at out_resolution.
inline AlignedFace align_face(const Tensor<float>& image, const LandmarkSet& landmarks,
                              std::int64_t out_resolution,
                              const FaceTemplate& tmpl = arcface_template(),
                              std::string source_id = {}) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.size() == 0)
    throw ShapeMismatch("align_face expects a non-empty (3, H, W) image");
  if (out_resolution <= 0) throw UsageError("out_resolution must be positive");
  const FaceTemplate t = tmpl.scaled_to(static_cast<double>(out_resolution));
  const AffineMatrix fwd = estimate_similarity_transform(landmarks, t.landmarks);
  AlignedFace face{unit_to_signed(warp_affine(image, invert_similarity(fwd), out_resolution)),
                   out_resolution, std::move(source_id)};
  return face;
}

// Resizes an already aligned crop to the working resolution.
inline AlignedFace from_prealigned(const Tensor<float>& image, std::int64_t out_resolution,
                                   std::string source_id = {}) {
  NoGrad ng;
  const auto batch = Var<float>::constant(image.reshaped(Shape{1, 3, image.dim(1), image.dim(2)}));
  Tensor<float> r = resize_bilinear(batch, out_resolution, out_resolution).value();
  return {unit_to_signed(std::move(r).reshaped(Shape{3, out_resolution, out_resolution})),
          out_resolution, std::move(source_id)};
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double brightness = 0.2;  // additive shift drawn from [-b, b]
  double contrast_min = 0.8, contrast_max = 1.25;
  double saturation_min = 0.8, saturation_max = 1.25;

  static AugmentConfig neutral() { return {0.0, 1.0, 1.0, 1.0, 1.0}; }
};

struct AugmentParams {
  double brightness = 0.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

inline AugmentParams draw_augment(const AugmentConfig& cfg, Rng& rng) {
  auto log_uniform = [&](double lo, double hi) {
    if (lo == hi) return lo;
    std::uniform_real_distribution<double> d(std::log(lo), std::log(hi));
    return std::exp(d(rng));
  };
  AugmentParams p;
  if (cfg.brightness > 0) {
    std::uniform_real_distribution<double> d(-cfg.brightness, cfg.brightness);
    p.brightness = d(rng);
  }
  p.contrast = log_uniform(cfg.contrast_min, cfg.contrast_max);
  p.saturation = log_uniform(cfg.saturation_min, cfg.saturation_max);
  return p;
}

// Brightness shift, contrast about the mean luminance, saturation about each
// pixel's luminance; result clipped to [-1, 1].
inline AlignedFace apply_augment(const AlignedFace& face, const AugmentParams& p) {
  AlignedFace out = face;
  const std::int64_t plane = face.resolution * face.resolution;
  float* px = out.pixels.data();
  constexpr double kLuma[3] = {0.299, 0.587, 0.114};
  for (std::int64_t i = 0; i < 3 * plane; ++i) px[i] = static_cast<float>(px[i] + p.brightness);
  if (p.contrast != 1.0) {
    double mean = 0;
    for (std::int64_t i = 0; i < plane; ++i)
      for (int c = 0; c < 3; ++c) mean += kLuma[c] * px[c * plane + i];
    mean /= static_cast<double>(plane);
    for (std::int64_t i = 0; i < 3 * plane; ++i)
      px[i] = static_cast<float>((px[i] - mean) * p.contrast + mean);
  }
  if (p.saturation != 1.0) {
    for (std::int64_t i = 0; i < plane; ++i) {
      double gray = 0;
      for (int c = 0; c < 3; ++c) gray += kLuma[c] * px[c * plane + i];
      for (int c = 0; c < 3; ++c)
        px[c * plane + i] = static_cast<float>(gray + (px[c * plane + i] - gray) * p.saturation);
    }
  }
  for (std::int64_t i = 0; i < 3 * plane; ++i) px[i] = std::clamp(px[i], -1.0f, 1.0f);
  return out;
}

inline AlignedFace augment(const AlignedFace& face, const AugmentConfig& cfg, Rng& rng) {
  return apply_augment(face, draw_augment(cfg, rng));
}

// ---------------------------------------------------------------------------
// Dataset store and pair sampling

struct Identity {
  std::string label;
  std::vector<AlignedFace> faces;
};

// Read-only after construction; safe for concurrent readers.
class FaceStore {
 public:
  FaceStore() = default;
  explicit FaceStore(std::vector<Identity> ids) : ids_(std::move(ids)) { reindex(); }

  void add_identity(Identity id) {
    ids_.push_back(std::move(id));
    reindex();
  }

  std::size_t identity_count() const { return ids_.size(); }
  std::size_t image_count() const { return flat_.size(); }
  const std::vector<Identity>& identities() const { return ids_; }
  const AlignedFace& image(std::size_t flat_index) const {
    const auto [i, j] = flat_.at(flat_index);
    return ids_[i].faces[j];
  }
  std::size_t identity_of(std::size_t flat_index) const { return flat_.at(flat_index).first; }
  std::int64_t resolution() const {
    return flat_.empty() ? 0 : image(0).resolution;
  }

 private:
  void reindex() {
    flat_.clear();
    for (std::size_t i = 0; i < ids_.size(); ++i)
      for (std::size_t j = 0; j < ids_[i].faces.size(); ++j) flat_.emplace_back(i, j);
  }

  std::vector<Identity> ids_;
  std::vector<std::pair<std::size_t, std::size_t>> flat_;
};

struct TrainingPair {
  AlignedFace target;  // X_t
  AlignedFace source;  // X_s
  bool is_same = false;
};

// Draws a batch of (target, source) pairs. Each pair is "same" independently
// with probability same_prob; if none is, one uniformly chosen pair is forced
// same. Augmentation is applied per drawn image before pairing, so same pairs
// stay pixel-identical.
inline std::vector<TrainingPair> sample_batch(const FaceStore& store, std::size_t batch_size,
                                              double same_prob, Rng& rng,
                                              const AugmentConfig* aug = nullptr) {
  if (store.image_count() < 2 || store.identity_count() < 2)
    throw EmptyDataset("pair sampling needs at least two identities and two images");
  if (batch_size < 1) throw UsageError("batch_size must be at least 1");
  const std::size_t n_img = store.image_count();
  std::uniform_int_distribution<std::size_t> pick(0, n_img - 1);
  std::bernoulli_distribution coin(same_prob);

  std::vector<std::size_t> targets(batch_size);
  std::vector<char> same(batch_size);
  bool any_same = false;
  for (std::size_t i = 0; i < batch_size; ++i) {
    targets[i] = pick(rng);
    same[i] = coin(rng);
    any_same = any_same || same[i];
  }
  if (!any_same) {
    std::uniform_int_distribution<std::size_t> which(0, batch_size - 1);
    same[which(rng)] = 1;
  }

  std::vector<TrainingPair> batch;
  batch.reserve(batch_size);
  std::uniform_int_distribution<std::size_t> other(0, n_img - 2);
  for (std::size_t i = 0; i < batch_size; ++i) {
    TrainingPair p;
    p.target = store.image(targets[i]);
    if (aug) p.target = augment(p.target, *aug, rng);
    p.is_same = same[i] != 0;
    if (p.is_same) {
      p.source = p.target;
    } else {
      std::size_t s = other(rng);
      if (s >= targets[i]) ++s;
      p.source = store.image(s);
      if (aug) p.source = augment(p.source, *aug, rng);
    }
    batch.push_back(std::move(p));
  }
  return batch;
}

// Packs faces into an (N, 3, R, R) batch.
template <typename T>
Tensor<T> to_batch(std::span<const AlignedFace> faces) {
  std::vector<Tensor<T>> parts;
  parts.reserve(faces.size());
  for (const auto& f : faces) {
    Tensor<T> t = f.pixels.template cast<T>();
    t.reshape(Shape{1, 3, f.resolution, f.resolution});
    parts.push_back(std::move(t));
  }
  return stack_batch<T>(parts);
}

template <typename T>
AlignedFace from_batch(const Tensor<T>& batch, std::int64_t n, std::string source_id = {}) {
  Tensor<float> t = batch.sample(n).template cast<float>();
  const std::int64_t r = batch.dim(2);
  t.reshape(Shape{3, r, r});
  for (auto& v : t.span()) v = std::clamp(v, -1.0f, 1.0f);
  return {std::move(t), r, std::move(source_id)};
}

// ---------------------------------------------------------------------------
// File formats

// Five lines "x y"; blank lines and '#' comments are ignored.
inline LandmarkSet read_landmarks(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FileNotFound("no such landmark file: " + path.string());
  LandmarkSet l;
  int n = 0;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    double x, y;
    if (!(is >> x >> y)) throw ParseError("bad landmark line in " + path.string() + ": " + line);
    if (n >= 5) throw ParseError("more than five landmarks in " + path.string());
    l.points[static_cast<std::size_t>(n++)] = {x, y};
  }
  if (n != 5) throw ParseError("expected five landmarks in " + path.string());
  l.validate();
  return l;
}

inline void write_landmarks(const std::filesystem::path& path, const LandmarkSet& l) {
  std::ofstream f(path);
  f.precision(10);
  for (const auto& p : l.points) f << p.x() << ' ' << p.y() << '\n';
}

// Template file: optional "resolution R" line followed by five "x y" lines.
inline FaceTemplate read_template(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FileNotFound("no such template file: " + path.string());
  FaceTemplate t;
  int n = 0;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    if (line.rfind("resolution", 0) == 0) {
      std::string key;
      is >> key >> t.resolution;
      continue;
    }
    double x, y;
    if (!(is >> x >> y) || n >= 5) throw ParseError("bad template line: " + line);
    t.landmarks.points[static_cast<std::size_t>(n++)] = {x, y};
  }
  if (n != 5) throw ParseError("expected five template points in " + path.string());
  return t;
}

inline std::filesystem::path landmark_sidecar(const std::filesystem::path& image) {
  return image.string() + ".landmarks";
}

// Loads <root>/<identity>/<image>; images with a ".landmarks" sidecar are
// aligned, others are treated as pre-aligned crops and resized.
inline FaceStore load_face_store(const std::filesystem::path& root, std::int64_t resolution,
                                 const FaceTemplate& tmpl = arcface_template()) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw FileNotFound("no such dataset directory: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<Identity> ids;
  for (const auto& d : dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(d))
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Identity id{d.filename().string(), {}};
    for (const auto& file : files) {
      const Tensor<float> img = read_image(file);
      const fs::path side = landmark_sidecar(file);
      id.faces.push_back(fs::exists(side)
                             ? align_face(img, read_landmarks(side), resolution, tmpl, id.label)
                             : from_prealigned(img, resolution, id.label));
    }
    if (!id.faces.empty()) ids.push_back(std::move(id));
  }
  if (ids.empty()) throw EmptyDataset("no images found under " + root.string());
  return FaceStore(std::move(ids));
}

}  // namespace facedancer
