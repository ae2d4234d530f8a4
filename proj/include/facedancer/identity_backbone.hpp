// SPDX-License-Identifier: Apache-2.0
//
// Face-recognition encoders behind a common interface: a 512-d identity
// embedding plus the ordered residual-block feature maps (blocks are 1-based).
#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "facedancer/archive.hpp"
#include "facedancer/face_pipeline.hpp"

namespace facedancer {

inline constexpr std::int64_t kEmbeddingDim = 512;

// Feature maps for blocks [first, first + blocks.size() - 1].
struct FeaturePyramid {
  std::vector<Tensor<float>> blocks;
  int first = 1;
};

template <typename T>
struct BackboneOutput {
  Var<T> embedding;             // (N, 512), undefined unless requested
  std::vector<Var<T>> blocks;   // blocks 1..k for the k that was requested
};

// Immutable after construction; forward passes only read parameters.
template <typename T>
class BackboneAdapter {
 public:
  virtual ~BackboneAdapter() = default;

  virtual std::string id() const = 0;
  virtual std::int64_t input_resolution() const = 0;
  virtual int block_count() const = 0;
  virtual std::uint64_t checksum() const = 0;
  bool frozen() const { return true; }

  // When false, inputs at the wrong resolution raise ResolutionMismatch.
  bool resample = true;

  // Batch (N, 3, H, W) in [-1, 1] -> (N, 512). Differentiable in x.
  Var<T> embed_batch(const Var<T>& x) const { return forward(prepare(x), 0, true).embedding; }

  // Blocks first..last inclusive. Differentiable in x.
  std::vector<Var<T>> features_batch(const Var<T>& x, int first, int last) const {
    check_range(first, last);
    auto out = forward(prepare(x), last, false);
    return {out.blocks.begin() + (first - 1), out.blocks.begin() + last};
  }

  // Embedding and blocks first..last from a single pass.
  BackboneOutput<T> run(const Var<T>& x, int first, int last) const {
    check_range(first, last);
    auto out = forward(prepare(x), block_count(), true);
    out.blocks = {out.blocks.begin() + (first - 1), out.blocks.begin() + last};
    return out;
  }

  Tensor<float> embed(const AlignedFace& face) const {
    NoGrad ng;
    const auto x = Var<T>::constant(to_batch<T>(std::span<const AlignedFace>(&face, 1)));
    return embed_batch(x).value().template cast<float>().reshaped(Shape{kEmbeddingDim});
  }

  FeaturePyramid intermediate_features(const AlignedFace& face, int first, int last) const {
    NoGrad ng;
    const auto x = Var<T>::constant(to_batch<T>(std::span<const AlignedFace>(&face, 1)));
    FeaturePyramid p{{}, first};
    for (const auto& b : features_batch(x, first, last)) {
      Shape s = b.shape();
      s.erase(s.begin());
      p.blocks.push_back(b.value().template cast<float>().reshaped(s));
    }
    return p;
  }

 protected:
  // Runs through block `stop` (all blocks when `embedding` is set).
  virtual BackboneOutput<T> forward(const Var<T>& x, int stop, bool embedding) const = 0;

  Var<T> prepare(const Var<T>& x) const {
    if (x.shape().size() != 4 || x.shape()[1] != 3)
      throw ShapeMismatch("backbone input must be (N, 3, H, W), got " + to_string(x.shape()));
    const std::int64_t r = input_resolution();
    if (x.shape()[2] == r && x.shape()[3] == r) return x;
    if (!resample)
      throw ResolutionMismatch("backbone " + id() + " expects " + std::to_string(r) + "px input");
    return resize_bilinear(x, r, r);
  }

  void check_range(int first, int last) const {
    if (first < 1 || first > last || last > block_count())
      throw IndexOutOfRange("block range " + std::to_string(first) + ".." + std::to_string(last) +
                            " outside 1.." + std::to_string(block_count()));
  }
};

// 1 - cos(a, b) for flattened maps of equal length.
inline double cosine_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeMismatch("cosine_distance of unequal lengths");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (!(na > 0) || !(nb > 0)) throw ZeroVector("cosine_distance of a zero vector");
  return std::clamp(1.0 - dot / std::sqrt(na * nb), 0.0, 2.0);
}

// Per-sample 1 - cos over flattened maps: (N, ...) x (N, ...) -> (N).
template <typename T>
Var<T> cosine_distance_rows(const Var<T>& a, const Var<T>& b) {
  return add_scalar(scale(cosine_similarity_rows(flatten(a), flatten(b)), T(-1)), T(1));
}

// ---------------------------------------------------------------------------
// Seeded stub: 8 residual blocks at 32px, spatial 32,32,16,16,8,8,4,4.
// No biases anywhere, so an all-zero image embeds to the zero vector.
template <typename T>
class StubBackbone final : public BackboneAdapter<T> {
 public:
  explicit StubBackbone(std::uint64_t seed = 1234, std::int64_t input_resolution = 32)
      : seed_(seed), res_(input_resolution) {
    if (res_ % 8 != 0) throw UsageError("stub backbone resolution must be a multiple of 8");
    Rng rng(seed);
    Scope<T> root{&params_, &rng, ""};
    stem_ = Conv2d<T>(root / "stem", 3, 16, 3, false);
    const std::int64_t widths[8] = {16, 16, 32, 32, 64, 64, 96, 96};
    std::int64_t in = 16;
    for (int i = 0; i < 8; ++i) {
      const int stride = (i == 2 || i == 4 || i == 6) ? 2 : 1;
      const auto s = root / ("block" + std::to_string(i + 1));
      blocks_.push_back({Conv2d<T>(s / "a", in, widths[i], 3, false, ConvGeom{stride, 1}),
                         Conv2d<T>(s / "b", widths[i], widths[i], 3, false, ConvGeom{1, 1}, 0.5)});
      in = widths[i];
    }
    const std::int64_t side = res_ / 8;
    head_ = Linear<T>(root / "head", in * side * side, kEmbeddingDim, false);
    params_.set_trainable(false);
  }

  std::string id() const override { return "stub-backbone-" + std::to_string(seed_); }
  std::int64_t input_resolution() const override { return res_; }
  int block_count() const override { return 8; }
  std::uint64_t checksum() const override { return params_.checksum(); }
  const ParamStore<T>& params() const { return params_; }

 protected:
  BackboneOutput<T> forward(const Var<T>& x, int stop, bool embedding) const override {
    BackboneOutput<T> out;
    Var<T> h = stem_(x);
    const int n = embedding ? 8 : stop;
    for (int i = 0; i < n; ++i) {
      const Var<T> y = blocks_[static_cast<std::size_t>(i)].a(h);
      h = leaky_relu(add(y, blocks_[static_cast<std::size_t>(i)].b(leaky_relu(y))));
      out.blocks.push_back(h);
    }
    if (embedding) out.embedding = head_(flatten(h));
    return out;
  }

 private:
  struct Block {
    Conv2d<T> a, b;
  };
  std::uint64_t seed_;
  std::int64_t res_;
  ParamStore<T> params_;
  Conv2d<T> stem_;
  std::vector<Block> blocks_;
  Linear<T> head_;
};

// ---------------------------------------------------------------------------
// ResNet50-class recognizer loaded from a tensor archive using torchvision
// parameter names (conv1, bn1, layer{1..4}.{b}.conv{1,2,3}, bn{1,2,3},
// downsample.{0,1}, fc). Batch norms are folded into the convolutions.
// Taps: the 16 bottleneck outputs, after the residual add and ReLU.
// Archive meta keys: id, input_resolution (default 112), bn_eps (1e-5).
template <typename T>
class ResNet50Backbone final : public BackboneAdapter<T> {
 public:
  static constexpr int kLayerBlocks[4] = {3, 4, 6, 3};

  static std::shared_ptr<ResNet50Backbone> load(const std::filesystem::path& path) {
    return std::make_shared<ResNet50Backbone>(TensorArchive::load(path), path.stem().string());
  }

  ResNet50Backbone(const TensorArchive& ar, std::string fallback_id) {
    id_ = ar.meta.value("id", fallback_id);
    res_ = ar.meta.value("input_resolution", std::int64_t{112});
    const double eps = ar.meta.value("bn_eps", 1e-5);
    auto folded = [&](const std::string& conv, const std::string& bn, int stride, int pad) {
      return fold(ar, conv + ".weight", bn, eps, ConvGeom{stride, pad});
    };
    stem_ = folded("conv1", "bn1", 2, 3);
    for (int l = 0; l < 4; ++l)
      for (int b = 0; b < kLayerBlocks[l]; ++b) {
        const std::string p = "layer" + std::to_string(l + 1) + "." + std::to_string(b) + ".";
        const int stride = (l > 0 && b == 0) ? 2 : 1;
        Bottleneck blk{folded(p + "conv1", p + "bn1", 1, 0), folded(p + "conv2", p + "bn2", stride, 1),
                       folded(p + "conv3", p + "bn3", 1, 0), {}};
        if (ar.contains(p + "downsample.0.weight"))
          blk.down = fold(ar, p + "downsample.0.weight", p + "downsample.1", eps, ConvGeom{stride, 0});
        blocks_.push_back(std::move(blk));
      }
    fc_w_ = Var<T>::constant(ar.get<T>("fc.weight"));
    if (fc_w_.shape().size() != 2 || fc_w_.shape()[0] != kEmbeddingDim)
      throw ShapeMismatch("fc.weight must be (512, C), got " + to_string(fc_w_.shape()));
    if (ar.contains("fc.bias")) fc_b_ = Var<T>::constant(ar.get<T>("fc.bias"));
    checksum_ = fnv(ar.serialize());
  }

  std::string id() const override { return id_; }
  std::int64_t input_resolution() const override { return res_; }
  int block_count() const override { return 16; }
  std::uint64_t checksum() const override { return checksum_; }

 protected:
  BackboneOutput<T> forward(const Var<T>& x, int stop, bool embedding) const override {
    BackboneOutput<T> out;
    Var<T> h = max_pool3s2(relu(stem_(x)));
    const int n = embedding ? 16 : stop;
    for (int i = 0; i < n; ++i) {
      const auto& b = blocks_[static_cast<std::size_t>(i)];
      const Var<T> r = b.c3(relu(b.c2(relu(b.c1(h)))));
      h = relu(add(r, b.down.weight.defined() ? b.down(h) : h));
      out.blocks.push_back(h);
    }
    if (embedding) {
      Var<T> e = matmul(mean_channels(h), fc_w_, false, true);
      if (fc_b_.defined()) e = add(e, broadcast_channels(fc_b_, e.shape()));
      out.embedding = e;
    }
    return out;
  }

 private:
  struct FoldedConv {
    Var<T> weight, bias;
    ConvGeom geom;
    Var<T> operator()(const Var<T>& x) const {
      const Var<T> y = conv2d(x, weight, geom);
      return add(y, broadcast_channels(bias, y.shape()));
    }
  };
  struct Bottleneck {
    FoldedConv c1, c2, c3, down;
  };

  static FoldedConv fold(const TensorArchive& ar, const std::string& weight, const std::string& bn,
                         double eps, ConvGeom geom) {
    Tensor<T> w = ar.get<T>(weight);
    const auto gamma = ar.get<T>(bn + ".weight"), beta = ar.get<T>(bn + ".bias");
    const auto mu = ar.get<T>(bn + ".running_mean"), var = ar.get<T>(bn + ".running_var");
    const std::int64_t out = w.dim(0), per = w.size() / out;
    if (gamma.size() != out) throw ShapeMismatch("batch norm width mismatch at " + bn);
    Tensor<T> bias(Shape{out});
    for (std::int64_t o = 0; o < out; ++o) {
      const T s = gamma[o] / static_cast<T>(std::sqrt(static_cast<double>(var[o]) + eps));
      for (std::int64_t k = 0; k < per; ++k) w[o * per + k] *= s;
      bias[o] = beta[o] - mu[o] * s;
    }
    return {Var<T>::constant(std::move(w)), Var<T>::constant(std::move(bias)), geom};
  }

  static std::uint64_t fnv(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  std::string id_;
  std::int64_t res_ = 112;
  FoldedConv stem_;
  std::vector<Bottleneck> blocks_;
  Var<T> fc_w_, fc_b_;
  std::uint64_t checksum_ = 0;
};

// Randomly initialized archive with the ResNet50 layout; `width` is the
// stem width (64 in the standard network). Useful for tests and smoke runs.
inline TensorArchive make_resnet50_archive(std::uint64_t seed, std::int64_t width = 64,
                                           std::int64_t input_resolution = 112) {
  Rng rng(seed);
  TensorArchive ar;
  ar.meta = {{"id", "resnet50-random-" + std::to_string(seed)},
             {"input_resolution", input_resolution}};
  auto conv = [&](const std::string& name, std::int64_t out, std::int64_t in, std::int64_t k) {
    ar.put(name, random_normal<float>(Shape{out, in, k, k}, rng, he_stddev(in * k * k)));
  };
  auto bn = [&](const std::string& name, std::int64_t c, float gamma = 1.0f) {
    ar.put(name + ".weight", Tensor<float>(Shape{c}, gamma));
    ar.put(name + ".bias", Tensor<float>(Shape{c}, 0.0f));
    ar.put(name + ".running_mean", Tensor<float>(Shape{c}, 0.0f));
    ar.put(name + ".running_var", Tensor<float>(Shape{c}, 1.0f));
  };
  conv("conv1.weight", width, 3, 7);
  bn("bn1", width);
  std::int64_t in = width;
  for (int l = 0; l < 4; ++l) {
    const std::int64_t mid = width << l, out = mid * 4;
    for (int b = 0; b < ResNet50Backbone<float>::kLayerBlocks[l]; ++b) {
      const std::string p = "layer" + std::to_string(l + 1) + "." + std::to_string(b) + ".";
      conv(p + "conv1.weight", mid, in, 1);
      bn(p + "bn1", mid);
      conv(p + "conv2.weight", mid, mid, 3);
      bn(p + "bn2", mid);
      conv(p + "conv3.weight", out, mid, 1);
      bn(p + "bn3", out, 0.2f);
      if (b == 0) {
        conv(p + "downsample.0.weight", out, in, 1);
        bn(p + "downsample.1", out);
      }
      in = out;
    }
  }
  ar.put("fc.weight", random_normal<float>(Shape{kEmbeddingDim, in}, rng, he_stddev(in)));
  ar.put("fc.bias", Tensor<float>(Shape{kEmbeddingDim}, 0.0f));
  return ar;
}

// Resolves a backbone id: "stub[:seed]" or a path to a ResNet50 archive.
template <typename T>
std::shared_ptr<BackboneAdapter<T>> make_backbone(const std::string& spec) {
  if (spec == "stub") return std::make_shared<StubBackbone<T>>();
  if (spec.rfind("stub:", 0) == 0)
    return std::make_shared<StubBackbone<T>>(std::stoull(spec.substr(5)));
  if (!std::filesystem::exists(spec)) throw FileNotFound("no such backbone archive: " + spec);
  return ResNet50Backbone<T>::load(spec);
}

}  // namespace facedancer
