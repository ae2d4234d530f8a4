// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <opencv2/imgcodecs.hpp>

#include <cmath>
#include <filesystem>
#include <string>

#include "facedancer/tensor.hpp"

namespace facedancer {

// Reads an RGB image as a (3, H, W) tensor with values in [0, 1].
inline Tensor<float> read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFound("no such image: " + path.string());
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw ImageIOError("cannot decode image " + path.string());
  const std::int64_t h = bgr.rows, w = bgr.cols;
  Tensor<float> out(Shape{3, h, w});
  for (std::int64_t y = 0; y < h; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out[(c * h + y) * w + x] = static_cast<float>(row[x][2 - c]) / 255.0f;
  }
  return out;
}

// Writes a (3, H, W) tensor with values in [lo, hi] as an 8-bit RGB image.
inline void write_image(const std::filesystem::path& path, const Tensor<float>& chw,
                        float lo = -1.0f, float hi = 1.0f) {
  if (chw.rank() != 3 || chw.dim(0) != 3)
    throw ShapeMismatch("write_image expects (3, H, W), got " + to_string(chw.shape()));
  const std::int64_t h = chw.dim(1), w = chw.dim(2);
  cv::Mat bgr(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
  for (std::int64_t y = 0; y < h; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = (chw[(c * h + y) * w + x] - lo) / (hi - lo);
        const float q = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f);
        row[x][2 - c] = static_cast<unsigned char>(q);
      }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw ImageIOError("cannot write image " + path.string());
}

// Single-channel map in [0, 1] written as grayscale.
inline void write_gray(const std::filesystem::path& path, const Tensor<float>& hw) {
  const std::int64_t h = hw.dim(0), w = hw.dim(1);
  cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      img.at<unsigned char>(static_cast<int>(y), static_cast<int>(x)) = static_cast<unsigned char>(
          std::round(std::clamp(hw[y * w + x], 0.0f, 1.0f) * 255.0f));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw ImageIOError("cannot write image " + path.string());
}

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace facedancer
