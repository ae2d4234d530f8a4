// SPDX-License-Identifier: Apache-2.0
//
// Identity-conditioned U-Net generator with mapping network, AdaIN decoder
// blocks and per-resolution skip fusion (AFFA gating, concatenation, addition).
#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "facedancer/identity_backbone.hpp"

namespace facedancer {

enum class Fusion { AFFA, CONCAT, ADD, NONE };

inline std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::AFFA: return "AFFA";
    case Fusion::CONCAT: return "CONCAT";
    case Fusion::ADD: return "ADD";
    case Fusion::NONE: return "NONE";
  }
  return "NONE";
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "AFFA") return Fusion::AFFA;
  if (s == "CONCAT") return Fusion::CONCAT;
  if (s == "ADD") return Fusion::ADD;
  if (s == "NONE") return Fusion::NONE;
  throw ParseError("unknown fusion type " + s);
}

// fusion_plan is keyed by decoder resolution and must name every decoder level.
struct ModelConfig {
  std::string name = "custom";
  bool use_mapping = true;
  bool use_ifsr = true;
  std::map<int, Fusion> fusion_plan;
  int resolution = 256;
  int base_channels = 64;
  int channel_cap = 512;
  int bottleneck_resolution = 8;

  // Decoder resolutions from the bottleneck upwards.
  std::vector<int> decoder_resolutions() const {
    std::vector<int> r;
    for (int s = bottleneck_resolution; s <= resolution; s *= 2) r.push_back(s);
    return r;
  }

  int channels_at(int res) const {
    const int down = static_cast<int>(std::lround(std::log2(static_cast<double>(resolution) / res)));
    return std::min(base_channels << down, channel_cap);
  }

  void validate() const {
    if (bottleneck_resolution < 2 || resolution % bottleneck_resolution != 0)
      throw ConfigMismatch("bottleneck_resolution must divide the resolution and be >= 2");
    const int ratio = resolution / bottleneck_resolution;
    if ((ratio & (ratio - 1)) != 0)
      throw ConfigMismatch("resolution / bottleneck_resolution must be a power of two");
    if (base_channels < 1 || channel_cap < base_channels)
      throw ConfigMismatch("channel schedule must satisfy 1 <= base_channels <= channel_cap");
    std::set<int> expect;
    for (int r : decoder_resolutions()) expect.insert(r);
    std::set<int> got;
    for (const auto& [r, f] : fusion_plan) got.insert(r);
    if (expect != got)
      throw ConfigMismatch("fusion_plan resolutions do not match the decoder levels of " + name);
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json plan = nlohmann::json::object();
  for (const auto& [r, f] : c.fusion_plan) plan[std::to_string(r)] = to_string(f);
  return {{"name", c.name},
          {"use_mapping", c.use_mapping},
          {"use_ifsr", c.use_ifsr},
          {"fusion_plan", plan},
          {"resolution", c.resolution},
          {"base_channels", c.base_channels},
          {"channel_cap", c.channel_cap},
          {"bottleneck_resolution", c.bottleneck_resolution}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.name = j.at("name");
  c.use_mapping = j.at("use_mapping");
  c.use_ifsr = j.at("use_ifsr");
  for (const auto& [k, v] : j.at("fusion_plan").items())
    c.fusion_plan[std::stoi(k)] = parse_fusion(v.get<std::string>());
  c.resolution = j.at("resolution");
  c.base_channels = j.at("base_channels");
  c.channel_cap = j.at("channel_cap");
  c.bottleneck_resolution = j.at("bottleneck_resolution");
  return c;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"baseline1", "baseline2", "configA", "configB",
                                                 "configC",   "configD",   "configE"};
  return names;
}

// Named variant. Plans are written for a 256px, 6-level decoder
// (256..8); other resolutions keep six levels and map plan entries by level.
// At 64px the bottleneck is 2 and the channel schedule is base 32, cap 128.
inline ModelConfig preset(const std::string& name, int resolution = 256) {
  if (resolution < 64 || (resolution & (resolution - 1)) != 0)
    throw UsageError("preset resolution must be a power of two >= 64");
  ModelConfig c;
  c.name = name;
  c.resolution = resolution;
  c.bottleneck_resolution = resolution / 32;
  c.base_channels = resolution >= 128 ? 64 : 32;
  c.channel_cap = resolution >= 128 ? 512 : 128;
  // level 0 is the output resolution, level 5 the bottleneck
  std::vector<Fusion> by_level(6, Fusion::NONE);
  auto top3 = [&](Fusion f) { by_level[0] = by_level[1] = by_level[2] = f; };
  if (name == "baseline1") {
    top3(Fusion::CONCAT);
  } else if (name == "baseline2") {
    top3(Fusion::ADD);
  } else if (name == "configA" || name == "configB") {
    top3(Fusion::AFFA);
    c.use_ifsr = name == "configB";
  } else if (name == "configC" || name == "configD" || name == "configE") {
    by_level = {Fusion::CONCAT, Fusion::AFFA, Fusion::AFFA, Fusion::AFFA, Fusion::NONE, Fusion::NONE};
    if (name != "configC") by_level[4] = by_level[5] = Fusion::AFFA;
    c.use_mapping = name != "configE";
  } else {
    throw UsageError("unknown preset " + name);
  }
  for (int l = 0; l < 6; ++l) c.fusion_plan[resolution >> l] = by_level[static_cast<std::size_t>(l)];
  return c;
}

// ---------------------------------------------------------------------------
// Building blocks

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& z) {
  const Var<T> n = rsqrt(add_scalar(reduce_samples(square(z)), T(1e-12)));
  return mul(z, broadcast_samples(n, z.shape()));
}

// Instance-normalizes h, then scales by gamma and shifts by beta, both (N, C).
template <typename T>
Var<T> adain_apply(const Var<T>& h, const Var<T>& gamma, const Var<T>& beta) {
  const Shape s = h.shape();
  return add(mul(instance_norm(h), broadcast_channels(gamma, s)), broadcast_channels(beta, s));
}

template <typename T>
struct AdaIN {
  Linear<T> to_gamma, to_beta;

  AdaIN() = default;
  AdaIN(const Scope<T>& s, std::int64_t style_dim, std::int64_t channels)
      : to_gamma(s / "gamma", style_dim, channels, true, 0.1, T(1)),
        to_beta(s / "beta", style_dim, channels, true, 0.1) {}

  Var<T> operator()(const Var<T>& h, const Var<T>& w) const {
    return adain_apply(h, to_gamma(w), to_beta(w));
  }
};

// Elementwise gate: h * m + (1 - m) * z.
template <typename T>
Var<T> affa_blend(const Var<T>& h, const Var<T>& z, const Var<T>& m) {
  if (h.shape() != z.shape() || h.shape() != m.shape())
    throw ShapeMismatch("affa_blend operands differ: " + to_string(h.shape()) + " vs " +
                        to_string(z.shape()));
  return add(mul(h, m), mul(sub(Var<T>::constant(Tensor<T>(m.shape(), T(1))), m), z));
}

template <typename T>
struct AffaModule {
  Conv2d<T> conv1, conv2;

  AffaModule() = default;
  AffaModule(const Scope<T>& s, std::int64_t channels)
      : conv1(s / "conv1", 2 * channels, channels, 3),
        conv2(s / "conv2", channels, channels, 3, true, ConvGeom{1, 1}, 0.01) {}

  Var<T> mask(const Var<T>& h, const Var<T>& z) const {
    return sigmoid(conv2(leaky_relu(conv1(concat_channels(std::vector<Var<T>>{h, z})))));
  }

  // Returns the fused map; the mask is written to *mask_out when given.
  Var<T> operator()(const Var<T>& h, const Var<T>& z, Var<T>* mask_out = nullptr) const {
    if (h.shape() != z.shape())
      throw ShapeMismatch("affa_fuse shapes differ: " + to_string(h.shape()) + " vs " +
                          to_string(z.shape()));
    const Var<T> m = mask(h, z);
    if (mask_out) *mask_out = m;
    return affa_blend(h, z, m);
  }
};

template <typename T>
struct ConcatFuse {
  Conv2d<T> conv;

  ConcatFuse() = default;
  ConcatFuse(const Scope<T>& s, std::int64_t channels) : conv(s / "conv", 2 * channels, channels, 3) {}

  Var<T> operator()(const Var<T>& h, const Var<T>& z) const {
    if (h.shape().size() != 4 || z.shape().size() != 4 || h.shape()[0] != z.shape()[0] ||
        h.shape()[2] != z.shape()[2] || h.shape()[3] != z.shape()[3])
      throw ShapeMismatch("concat_fuse spatial shapes differ: " + to_string(h.shape()) + " vs " +
                          to_string(z.shape()));
    return conv(concat_channels(std::vector<Var<T>>{h, z}));
  }
};

// Pre-activation residual block with instance norm; optional 2x average-pool
// downsampling on both paths.
template <typename T>
struct EncoderBlock {
  InstanceNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2, shortcut;
  bool downsample = true;

  EncoderBlock() = default;
  EncoderBlock(const Scope<T>& s, std::int64_t in, std::int64_t out, bool down)
      : norm1(s / "norm1", in),
        norm2(s / "norm2", in),
        conv1(s / "conv1", in, in, 3),
        conv2(s / "conv2", in, out, 3),
        downsample(down) {
    if (in != out) shortcut = Conv2d<T>(s / "shortcut", in, out, 1, false);
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = conv1(leaky_relu(norm1(x)));
    if (downsample) h = avg_pool2(h);
    h = conv2(leaky_relu(norm2(h)));
    Var<T> sc = downsample ? avg_pool2(x) : x;
    if (shortcut.weight.defined()) sc = shortcut(sc);
    return scale(add(h, sc), static_cast<T>(1.0 / std::sqrt(2.0)));
  }
};

// Residual block with AdaIN before both convolutions; optional bilinear 2x
// upsampling on both paths.
template <typename T>
struct DecoderBlock {
  AdaIN<T> norm1, norm2;
  Conv2d<T> conv1, conv2, shortcut;
  bool upsample = true;

  DecoderBlock() = default;
  DecoderBlock(const Scope<T>& s, std::int64_t style_dim, std::int64_t in, std::int64_t out, bool up)
      : norm1(s / "adain1", style_dim, in),
        norm2(s / "adain2", style_dim, out),
        conv1(s / "conv1", in, out, 3),
        conv2(s / "conv2", out, out, 3),
        upsample(up) {
    if (in != out) shortcut = Conv2d<T>(s / "shortcut", in, out, 1, false);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& w) const {
    Var<T> h = leaky_relu(norm1(x, w));
    if (upsample) h = upsample2(h);
    h = conv2(leaky_relu(norm2(conv1(h), w)));
    Var<T> sc = upsample ? upsample2(x) : x;
    if (shortcut.weight.defined()) sc = shortcut(sc);
    return scale(add(h, sc), static_cast<T>(1.0 / std::sqrt(2.0)));
  }
};

template <typename T>
struct MappingNetwork {
  std::vector<Linear<T>> layers;

  MappingNetwork() = default;
  explicit MappingNetwork(const Scope<T>& s) {
    for (int i = 0; i < 4; ++i)
      layers.emplace_back(s / ("fc" + std::to_string(i)), kEmbeddingDim, kEmbeddingDim);
  }

  Var<T> operator()(const Var<T>& z) const {
    Var<T> h = z;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i](h);
      if (i + 1 < layers.size()) h = leaky_relu(h);
    }
    return h;
  }
};

template <typename T>
struct GeneratorOutput {
  Var<T> image;                // (N, 3, R, R) in [-1, 1]
  std::map<int, Var<T>> masks; // AFFA masks keyed by decoder resolution
};

// ---------------------------------------------------------------------------

template <typename T>
class Generator {
 public:
  Generator(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    Scope<T> root{&params_, &rng, ""};
    if (cfg_.use_mapping) mapping_ = MappingNetwork<T>(root / "mapping");
    const int res = cfg_.resolution;
    stem_ = Conv2d<T>(root / "stem", 3, cfg_.channels_at(res), 3);
    // encoder block j maps res/2^j -> res/2^(j+1)
    for (int r = res; r > cfg_.bottleneck_resolution; r /= 2)
      encoder_.emplace_back(root / ("enc" + std::to_string(r)), cfg_.channels_at(r),
                            cfg_.channels_at(r / 2), true);
    for (int r : cfg_.decoder_resolutions()) {
      const auto s = root / ("dec" + std::to_string(r));
      const bool up = r != cfg_.bottleneck_resolution;
      const int in = cfg_.channels_at(up ? r / 2 : r), out = cfg_.channels_at(r);
      decoder_.emplace_back(s, kEmbeddingDim, in, out, up);
      const Fusion f = cfg_.fusion_plan.at(r);
      if (f == Fusion::AFFA) affa_[r] = AffaModule<T>(s / "affa", out);
      if (f == Fusion::CONCAT) concat_[r] = ConcatFuse<T>(s / "concat", out);
    }
    head_ = Conv2d<T>(root / "head", cfg_.channels_at(res), 3, 3);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // w_id from z_id; the identity map when the mapping network is disabled.
  Var<T> map_identity(const Var<T>& z_id) const {
    if (z_id.shape().size() != 2 || z_id.shape()[1] != kEmbeddingDim)
      throw ShapeMismatch("identity vectors must be (N, 512), got " + to_string(z_id.shape()));
    return cfg_.use_mapping ? mapping_(z_id) : z_id;
  }

  // x_t (N, 3, R, R), z_id (N, 512). The embedding is L2-normalized first.
  GeneratorOutput<T> forward(const Var<T>& x_t, const Var<T>& z_id) const {
    const Shape s = x_t.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.resolution || s[3] != cfg_.resolution)
      throw ResolutionMismatch("generator expects (N, 3, " + std::to_string(cfg_.resolution) + ", " +
                               std::to_string(cfg_.resolution) + "), got " + to_string(s));
    if (z_id.shape().size() != 2 || z_id.shape()[0] != s[0])
      throw ShapeMismatch("identity batch does not match image batch");
    const Var<T> w = map_identity(l2_normalize_rows(z_id));

    std::map<int, Var<T>> skips;
    Var<T> h = stem_(x_t);
    int r = cfg_.resolution;
    for (const auto& blk : encoder_) {
      skips[r] = h;
      h = blk(h);
      r /= 2;
    }
    skips[r] = h;

    GeneratorOutput<T> out;
    const auto levels = cfg_.decoder_resolutions();
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const int lr = levels[i];
      h = decoder_[i](h, w);
      const Var<T>& z = skips.at(lr);
      switch (cfg_.fusion_plan.at(lr)) {
        case Fusion::AFFA: {
          Var<T> m;
          h = affa_.at(lr)(h, z, &m);
          out.masks[lr] = m;
          break;
        }
        case Fusion::CONCAT: h = concat_.at(lr)(h, z); break;
        case Fusion::ADD: h = add(h, z); break;
        case Fusion::NONE: break;
      }
    }
    out.image = tanh(head_(leaky_relu(h)));
    return out;
  }

  Var<T> operator()(const Var<T>& x_t, const Var<T>& z_id) const { return forward(x_t, z_id).image; }

  const AffaModule<T>& affa_at(int res) const { return affa_.at(res); }
  const ConcatFuse<T>& concat_at(int res) const { return concat_.at(res); }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  MappingNetwork<T> mapping_;
  Conv2d<T> stem_, head_;
  std::vector<EncoderBlock<T>> encoder_;
  std::vector<DecoderBlock<T>> decoder_;
  std::map<int, AffaModule<T>> affa_;
  std::map<int, ConcatFuse<T>> concat_;
};

}  // namespace facedancer
