// SPDX-License-Identifier: Apache-2.0
//
// Multi-tap image feature extractors for perceptual feature matching and FID.
#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "facedancer/archive.hpp"
#include "facedancer/nn.hpp"

namespace facedancer {

template <typename T>
class PerceptualAdapter {
 public:
  virtual ~PerceptualAdapter() = default;
  virtual std::string id() const = 0;
  virtual int tap_count() const = 0;
  virtual std::uint64_t checksum() const = 0;
  // (N, 3, H, W) in [-1, 1] -> one feature map per tap. Differentiable in x.
  virtual std::vector<Var<T>> taps(const Var<T>& x) const = 0;

  // Global-average-pooled deepest tap, (N, C). Used as the FID feature.
  Var<T> pooled_features(const Var<T>& x) const { return mean_channels(taps(x).back()); }
};

// Five taps that all return the input unchanged.
template <typename T>
class IdentityTapPerceptual final : public PerceptualAdapter<T> {
 public:
  std::string id() const override { return "identity-taps"; }
  int tap_count() const override { return 5; }
  std::uint64_t checksum() const override { return 0; }
  std::vector<Var<T>> taps(const Var<T>& x) const override { return std::vector<Var<T>>(5, x); }
};

// Seeded five-stage conv stack; each stage after the first halves resolution.
template <typename T>
class StubPerceptual final : public PerceptualAdapter<T> {
 public:
  explicit StubPerceptual(std::uint64_t seed = 4321) : seed_(seed) {
    Rng rng(seed);
    Scope<T> root{&params_, &rng, ""};
    const std::int64_t widths[5] = {8, 16, 32, 32, 64};
    std::int64_t in = 3;
    for (int i = 0; i < 5; ++i) {
      convs_.emplace_back(root / ("conv" + std::to_string(i)), in, widths[i], 3, true);
      in = widths[i];
    }
    params_.set_trainable(false);
  }

  std::string id() const override { return "stub-perceptual-" + std::to_string(seed_); }
  int tap_count() const override { return 5; }
  std::uint64_t checksum() const override { return params_.checksum(); }

  std::vector<Var<T>> taps(const Var<T>& x) const override {
    std::vector<Var<T>> out;
    Var<T> h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      if (i > 0) h = avg_pool2(h);
      h = leaky_relu(convs_[i](h));
      out.push_back(h);
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  ParamStore<T> params_;
  std::vector<Conv2d<T>> convs_;
};

// VGG16 convolutional trunk from a tensor archive with torchvision names
// (features.{0,2,5,7,10,12,14,17,19,21,24,26,28}.weight/bias). Taps are
// relu1_2, relu2_2, relu3_3, relu4_3 and relu5_3. Inputs are mapped from
// [-1, 1] to ImageNet-normalized RGB.
template <typename T>
class Vgg16Perceptual final : public PerceptualAdapter<T> {
 public:
  static constexpr int kConvIndex[13] = {0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28};
  static constexpr int kStageEnd[5] = {1, 3, 6, 9, 12};  // last conv of each stage

  static std::shared_ptr<Vgg16Perceptual> load(const std::filesystem::path& path) {
    return std::make_shared<Vgg16Perceptual>(TensorArchive::load(path), path.stem().string());
  }

  Vgg16Perceptual(const TensorArchive& ar, std::string fallback_id) {
    id_ = ar.meta.value("id", fallback_id);
    for (int idx : kConvIndex) {
      const std::string p = "features." + std::to_string(idx) + ".";
      weights_.push_back(Var<T>::constant(ar.get<T>(p + "weight")));
      biases_.push_back(Var<T>::constant(ar.get<T>(p + "bias")));
    }
    const std::string bytes = ar.serialize();
    for (unsigned char c : bytes) {
      checksum_ ^= c;
      checksum_ *= 1099511628211ull;
    }
  }

  std::string id() const override { return id_; }
  int tap_count() const override { return 5; }
  std::uint64_t checksum() const override { return checksum_; }

  std::vector<Var<T>> taps(const Var<T>& x) const override {
    const Shape s = x.shape();
    Tensor<T> mul_t(Shape{3}), add_t(Shape{3});
    const double mean[3] = {0.485, 0.456, 0.406}, sd[3] = {0.229, 0.224, 0.225};
    for (int c = 0; c < 3; ++c) {
      mul_t[c] = static_cast<T>(0.5 / sd[c]);
      add_t[c] = static_cast<T>((0.5 - mean[c]) / sd[c]);
    }
    Var<T> h = add(mul(x, broadcast_channels(Var<T>::constant(mul_t), s)),
                   broadcast_channels(Var<T>::constant(add_t), s));
    std::vector<Var<T>> out;
    int stage = 0;
    for (int i = 0; i < 13; ++i) {
      if (stage > 0 && i == kStageEnd[stage - 1] + 1) h = max_pool2(h);
      const Var<T> y = conv2d(h, weights_[static_cast<std::size_t>(i)], ConvGeom{1, 1});
      h = relu(add(y, broadcast_channels(biases_[static_cast<std::size_t>(i)], y.shape())));
      if (i == kStageEnd[stage]) {
        out.push_back(h);
        ++stage;
      }
    }
    return out;
  }

 private:
  std::string id_;
  std::vector<Var<T>> weights_, biases_;
  std::uint64_t checksum_ = 1469598103934665603ull;
};

// Random archive with the VGG16 layout at reduced width (64 is standard).
inline TensorArchive make_vgg16_archive(std::uint64_t seed, std::int64_t width = 64) {
  Rng rng(seed);
  TensorArchive ar;
  ar.meta = {{"id", "vgg16-random-" + std::to_string(seed)}};
  const std::int64_t outs[13] = {1, 1, 2, 2, 4, 4, 4, 8, 8, 8, 8, 8, 8};
  std::int64_t in = 3;
  for (int i = 0; i < 13; ++i) {
    const std::int64_t out = outs[i] * width;
    const std::string p = "features." + std::to_string(Vgg16Perceptual<float>::kConvIndex[i]) + ".";
    ar.put(p + "weight", random_normal<float>(Shape{out, in, 3, 3}, rng, he_stddev(in * 9)));
    ar.put(p + "bias", Tensor<float>(Shape{out}, 0.0f));
    in = out;
  }
  return ar;
}

// Resolves "stub[:seed]", "identity" or a path to a VGG16 archive.
template <typename T>
std::shared_ptr<PerceptualAdapter<T>> make_perceptual(const std::string& spec) {
  if (spec == "stub") return std::make_shared<StubPerceptual<T>>();
  if (spec.rfind("stub:", 0) == 0)
    return std::make_shared<StubPerceptual<T>>(std::stoull(spec.substr(5)));
  if (spec == "identity") return std::make_shared<IdentityTapPerceptual<T>>();
  if (!std::filesystem::exists(spec)) throw FileNotFound("no such perceptual archive: " + spec);
  return Vgg16Perceptual<T>::load(spec);
}

}  // namespace facedancer
