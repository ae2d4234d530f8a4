// SPDX-License-Identifier: Apache-2.0
//
// Procedural face-like images with known landmarks, for tests and demos.
// Identity fixes skin tone, head shape, eye spacing and colors; each image
// varies pose, expression, lighting and background.
#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "facedancer/face_pipeline.hpp"

namespace facedancer {

struct SyntheticIdentity {
  Eigen::Vector3d skin, hair, iris, lips;
  double face_rx = 0.30, face_ry = 0.38;  // ellipse radii, fraction of image
  double eye_dx = 0.11, eye_y = -0.06, eye_r = 0.035;
  double nose_y = 0.06, mouth_y = 0.18, mouth_w = 0.09;
  double hair_line = -0.22;

  static SyntheticIdentity draw(std::uint64_t seed) {
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + 17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto col = [&](double lo, double hi) {
      return Eigen::Vector3d(lo + (hi - lo) * u(rng), lo + (hi - lo) * u(rng), lo + (hi - lo) * u(rng));
    };
    SyntheticIdentity s;
    const double tone = 0.35 + 0.55 * u(rng);
    s.skin = Eigen::Vector3d(tone, tone * (0.70 + 0.2 * u(rng)), tone * (0.55 + 0.25 * u(rng)));
    s.hair = col(0.02, 0.6);
    s.iris = col(0.05, 0.7);
    s.lips = Eigen::Vector3d(0.5 + 0.4 * u(rng), 0.15 + 0.25 * u(rng), 0.2 + 0.2 * u(rng));
    s.face_rx = 0.26 + 0.08 * u(rng);
    s.face_ry = 0.34 + 0.08 * u(rng);
    s.eye_dx = 0.09 + 0.05 * u(rng);
    s.eye_y = -0.09 + 0.05 * u(rng);
    s.eye_r = 0.025 + 0.02 * u(rng);
    s.nose_y = 0.04 + 0.05 * u(rng);
    s.mouth_y = 0.15 + 0.06 * u(rng);
    s.mouth_w = 0.07 + 0.05 * u(rng);
    s.hair_line = -0.26 + 0.1 * u(rng);
    return s;
  }
};

struct SyntheticView {
  double angle = 0.0, scale = 1.0, tx = 0.0, ty = 0.0;
  double smile = 0.0, mouth_open = 0.0, blink = 0.0;
  double light_x = 0.0, light_gain = 1.0;
  Eigen::Vector3d background{0.5, 0.5, 0.5};

  static SyntheticView draw(Rng& rng, double pose_range = 1.0) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> p(0.0, 1.0);
    SyntheticView v;
    v.angle = 0.2 * pose_range * u(rng);
    v.scale = 1.0 + 0.1 * pose_range * u(rng);
    v.tx = 0.05 * pose_range * u(rng);
    v.ty = 0.05 * pose_range * u(rng);
    v.smile = p(rng);
    v.mouth_open = p(rng) * p(rng);
    v.blink = p(rng) < 0.15 ? 0.8 : 0.0;
    v.light_x = 0.4 * u(rng);
    v.light_gain = 0.85 + 0.3 * p(rng);
    v.background = Eigen::Vector3d(p(rng), p(rng), p(rng));
    return v;
  }
};

struct SyntheticFace {
  Tensor<float> image;  // (3, S, S) in [0, 1]
  LandmarkSet landmarks;
};

// Renders at `size` pixels. Geometry is defined in a face frame with the
// origin at the image center and unit = image side.
inline SyntheticFace render_synthetic_face(const SyntheticIdentity& id, const SyntheticView& v,
                                           std::int64_t size) {
  const double s = static_cast<double>(size);
  const double ca = std::cos(v.angle), sa = std::sin(v.angle);
  auto to_pixel = [&](double fx, double fy) {
    const double x = v.scale * (ca * fx - sa * fy) + v.tx;
    const double y = v.scale * (sa * fx + ca * fy) + v.ty;
    return Eigen::Vector2d((x + 0.5) * s - 0.5, (y + 0.5) * s - 0.5);
  };
  SyntheticFace out;
  out.landmarks.points = {to_pixel(-id.eye_dx, id.eye_y), to_pixel(id.eye_dx, id.eye_y),
                          to_pixel(0.0, id.nose_y),
                          to_pixel(-id.mouth_w, id.mouth_y - 0.02 * v.smile),
                          to_pixel(id.mouth_w, id.mouth_y - 0.02 * v.smile)};
  out.image = Tensor<float>(Shape{3, size, size});
  const std::int64_t plane = size * size;
  auto sq = [](double a) { return a * a; };
  for (std::int64_t py = 0; py < size; ++py)
    for (std::int64_t px = 0; px < size; ++px) {
      // Inverse map pixel center to the face frame.
      const double x = (static_cast<double>(px) + 0.5) / s - 0.5 - v.tx;
      const double y = (static_cast<double>(py) + 0.5) / s - 0.5 - v.ty;
      const double fx = (ca * x + sa * y) / v.scale, fy = (-sa * x + ca * y) / v.scale;
      Eigen::Vector3d c = v.background * (0.8 + 0.2 * (static_cast<double>(py) / s));
      const double face = sq(fx / id.face_rx) + sq(fy / id.face_ry);
      if (face <= 1.0) {
        const double shade = v.light_gain * (1.0 + v.light_x * fx / id.face_rx) *
                             (1.0 - 0.15 * face);
        c = id.skin * shade;
        if (fy < id.hair_line + 0.03 * std::cos(fx * 20.0)) c = id.hair * (0.8 + 0.2 * shade);
        for (double side : {-1.0, 1.0}) {
          const double ex = fx - side * id.eye_dx, ey = fy - id.eye_y;
          const double open = 1.0 - v.blink;
          const double white = sq(ex / (id.eye_r * 1.7)) + sq(ey / (id.eye_r * open + 1e-3));
          if (white <= 1.0) {
            c = Eigen::Vector3d(0.92, 0.92, 0.9);
            if (sq(ex) + sq(ey) <= sq(id.eye_r * 0.7)) c = id.iris;
            if (sq(ex) + sq(ey) <= sq(id.eye_r * 0.3)) c = Eigen::Vector3d(0.03, 0.03, 0.03);
          }
          const double brow_y = id.eye_y - id.eye_r * 2.2;
          if (std::abs(ex) < id.eye_r * 2.0 && std::abs(fy - brow_y) < 0.01) c = id.hair * 0.7;
        }
        const double nx = fx, ny = fy - id.nose_y;
        if (std::abs(nx) < 0.025 * (1.0 - ny / 0.08) && ny < 0.0 && ny > -0.08)
          c = id.skin * shade * 0.85;
        if (sq(nx / 0.03) + sq(ny / 0.015) <= 1.0) c = id.skin * shade * 0.6;
        const double mx = fx / id.mouth_w, my = fy - id.mouth_y;
        const double curve = -0.03 * v.smile * (1.0 - mx * mx);
        const double half = 0.008 + 0.03 * v.mouth_open;
        if (std::abs(mx) <= 1.0 && std::abs(my - curve) < half * std::sqrt(1.0 - mx * mx) + 0.004)
          c = (std::abs(my - curve) < half * 0.6 && v.mouth_open > 0.2) ? Eigen::Vector3d(0.2, 0.05, 0.05)
                                                                       : id.lips * shade;
      }
      for (int k = 0; k < 3; ++k)
        out.image[k * plane + py * size + px] = static_cast<float>(std::clamp(c[k], 0.0, 1.0));
    }
  return out;
}

// Builds an aligned face store of `identities` x `per_identity` synthetic
// images at `resolution`.
inline FaceStore make_synthetic_store(std::size_t identities, std::size_t per_identity,
                                      std::int64_t resolution, std::uint64_t seed,
                                      std::int64_t render_size = 0) {
  if (render_size <= 0) render_size = resolution + resolution / 2;
  Rng rng(seed);
  std::vector<Identity> ids;
  for (std::size_t i = 0; i < identities; ++i) {
    const auto sid = SyntheticIdentity::draw(seed * 1000003ULL + i);
    Identity id{"id" + std::to_string(i), {}};
    for (std::size_t j = 0; j < per_identity; ++j) {
      const auto face = render_synthetic_face(sid, SyntheticView::draw(rng), render_size);
      id.faces.push_back(align_face(face.image, face.landmarks, resolution, arcface_template(),
                                    id.label));
    }
    ids.push_back(std::move(id));
  }
  return FaceStore(std::move(ids));
}

// Writes <dir>/<identity>/<n>.png plus landmark sidecars.
inline void write_synthetic_dataset(const std::filesystem::path& dir, std::size_t identities,
                                    std::size_t per_identity, std::int64_t size,
                                    std::uint64_t seed, bool sidecars = true) {
  Rng rng(seed);
  for (std::size_t i = 0; i < identities; ++i) {
    const auto sid = SyntheticIdentity::draw(seed * 1000003ULL + i);
    const auto sub = dir / ("id" + std::to_string(i));
    std::filesystem::create_directories(sub);
    for (std::size_t j = 0; j < per_identity; ++j) {
      const auto face = render_synthetic_face(sid, SyntheticView::draw(rng), size);
      const auto file = sub / (std::to_string(j) + ".png");
      write_image(file, face.image, 0.0f, 1.0f);
      if (sidecars) write_landmarks(landmark_sidecar(file), face.landmarks);
    }
  }
}

}  // namespace facedancer
