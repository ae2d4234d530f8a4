// SPDX-License-Identifier: Apache-2.0
//
// Unconditional residual critic: downsampling blocks to 4x4, global spatial
// sum and a linear head producing one unbounded score per image.
#pragma once

#include "facedancer/generator.hpp"

namespace facedancer {

template <typename T>
struct CriticBlock {
  Conv2d<T> conv1, conv2, shortcut;

  CriticBlock() = default;
  CriticBlock(const Scope<T>& s, std::int64_t in, std::int64_t out)
      : conv1(s / "conv1", in, in, 3), conv2(s / "conv2", in, out, 3) {
    if (in != out) shortcut = Conv2d<T>(s / "shortcut", in, out, 1, false);
  }

  Var<T> operator()(const Var<T>& x) const {
    const Var<T> h = conv2(leaky_relu(avg_pool2(conv1(leaky_relu(x)))));
    Var<T> sc = avg_pool2(x);
    if (shortcut.weight.defined()) sc = shortcut(sc);
    return scale(add(h, sc), static_cast<T>(1.0 / std::sqrt(2.0)));
  }
};

template <typename T>
class Discriminator {
 public:
  Discriminator(int resolution, int base_channels, int channel_cap, std::uint64_t seed)
      : res_(resolution) {
    if (resolution < 8 || (resolution & (resolution - 1)) != 0)
      throw ConfigMismatch("critic resolution must be a power of two >= 8");
    Rng rng(seed);
    Scope<T> root{&params_, &rng, ""};
    std::int64_t ch = base_channels;
    stem_ = Conv2d<T>(root / "stem", 3, ch, 3);
    for (int r = resolution; r > 4; r /= 2) {
      const std::int64_t out = std::min<std::int64_t>(ch * 2, channel_cap);
      blocks_.emplace_back(root / ("down" + std::to_string(r)), ch, out);
      ch = out;
    }
    head_ = Linear<T>(root / "head", ch, 1);
  }

  explicit Discriminator(const ModelConfig& cfg, std::uint64_t seed)
      : Discriminator(cfg.resolution, cfg.base_channels, cfg.channel_cap, seed) {}

  int resolution() const { return res_; }
  int downsample_count() const { return static_cast<int>(blocks_.size()); }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // (N, 3, R, R) -> (N)
  Var<T> operator()(const Var<T>& x) const {
    const Shape s = x.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != res_ || s[3] != res_)
      throw ResolutionMismatch("critic expects " + std::to_string(res_) + "px input, got " +
                               to_string(s));
    Var<T> h = stem_(x);
    for (const auto& b : blocks_) h = b(h);
    h = reduce_channels(leaky_relu(h), Shape{s[0], h.shape()[1]});
    return reshape(head_(h), Shape{s[0]});
  }

 private:
  int res_;
  ParamStore<T> params_;
  Conv2d<T> stem_;
  std::vector<CriticBlock<T>> blocks_;
  Linear<T> head_;
};

}  // namespace facedancer
