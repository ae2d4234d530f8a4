// SPDX-License-Identifier: Apache-2.0
//
// Per-block distance statistics between swapped, target, source and
// impostor faces; margin derivation; equal error rates; report output.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "facedancer/generator.hpp"
#include "facedancer/identity_backbone.hpp"
#include "facedancer/margins.hpp"

namespace facedancer {

struct DistanceSample {
  int block_index = 0;
  double c2t = 0;  // changed vs target
  double c2s = 0;  // changed vs source
  double neg = 0;  // two faces of different identities

  friend bool operator==(const DistanceSample&, const DistanceSample&) = default;
};

using EERCurve = std::map<int, double>;

// Maps a (target, source) batch, both (N, 3, R, R) in [-1, 1], to X_c.
struct SwapModel {
  std::string id;
  std::function<Tensor<float>(const Tensor<float>&, const Tensor<float>&)> swap;
};

inline SwapModel identity_passthrough_model() {
  return {"identity-passthrough", [](const Tensor<float>& t, const Tensor<float>&) { return t; }};
}

inline SwapModel source_passthrough_model() {
  return {"source-passthrough", [](const Tensor<float>&, const Tensor<float>& s) { return s; }};
}

// X_c = G(X_t, I(X_s)) with a frozen recognizer supplying the identity.
inline SwapModel generator_swap_model(std::shared_ptr<const Generator<float>> gen,
                                      std::shared_ptr<const BackboneAdapter<float>> backbone,
                                      std::string id) {
  return {std::move(id), [gen, backbone](const Tensor<float>& t, const Tensor<float>& s) {
            NoGrad ng;
            const auto z = backbone->embed_batch(Var<float>::constant(s));
            return (*gen)(Var<float>::constant(t), z).value();
          }};
}

struct CollectOptions {
  int first_block = 1;
  int last_block = -1;  // -1: the backbone's last block
  std::size_t batch_size = 8;
};

namespace detail {

inline std::vector<double> rowwise_cosine_distance(const Tensor<float>& a, const Tensor<float>& b) {
  const std::int64_t n = a.dim(0), per = a.size() / n;
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] =
        cosine_distance(std::span<const float>(a.data() + i * per, static_cast<std::size_t>(per)),
                        std::span<const float>(b.data() + i * per, static_cast<std::size_t>(per)));
  return out;
}

inline std::vector<Tensor<float>> block_features(const BackboneAdapter<float>& backbone,
                                                 const Tensor<float>& x, int first, int last) {
  NoGrad ng;
  std::vector<Tensor<float>> out;
  for (const auto& f : backbone.features_batch(Var<float>::constant(x), first, last))
    out.push_back(f.value());
  return out;
}

}  // namespace detail

// Samples are ordered triplet-major, block-minor. All draws come from `seed`
// before any model evaluation, so results do not depend on batch size.
inline std::vector<DistanceSample> collect_distances(const SwapModel& model,
                                                     const BackboneAdapter<float>& backbone,
                                                     const FaceStore& store, std::size_t n_triplets,
                                                     std::uint64_t seed, CollectOptions opt = {}) {
  if (n_triplets < 1) throw UsageError("n_triplets must be at least 1");
  if (store.identity_count() < 3)
    throw InsufficientIdentities("calibration needs at least three identities, got " +
                                 std::to_string(store.identity_count()));
  const int first = opt.first_block, last = opt.last_block < 0 ? backbone.block_count() : opt.last_block;
  if (first < 1 || first > last || last > backbone.block_count())
    throw IndexOutOfRange("calibration block range outside the backbone");
  if (opt.batch_size < 1) opt.batch_size = 1;

  // Per identity, the flat indices of its faces.
  std::vector<std::vector<std::size_t>> by_id(store.identity_count());
  for (std::size_t k = 0; k < store.image_count(); ++k) by_id[store.identity_of(k)].push_back(k);
  std::vector<std::size_t> nonempty;
  for (std::size_t i = 0; i < by_id.size(); ++i)
    if (!by_id[i].empty()) nonempty.push_back(i);
  if (nonempty.size() < 3) throw InsufficientIdentities("fewer than three identities have faces");

  struct Triplet {
    std::size_t target, source, impostor;
  };
  Rng rng(seed);
  auto pick_face = [&](std::size_t identity) {
    const auto& v = by_id[identity];
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  std::vector<Triplet> triplets(n_triplets);
  for (auto& tr : triplets) {
    std::vector<std::size_t> ids = nonempty;
    std::shuffle(ids.begin(), ids.end(), rng);
    tr.target = pick_face(ids[0]);
    tr.source = pick_face(ids[1]);
    tr.impostor = pick_face(ids[2]);
  }

  const int nb = last - first + 1;
  std::vector<DistanceSample> out(n_triplets * static_cast<std::size_t>(nb));
  for (std::size_t b0 = 0; b0 < n_triplets; b0 += opt.batch_size) {
    const std::size_t b1 = std::min(n_triplets, b0 + opt.batch_size);
    std::vector<AlignedFace> tf, sf, nf;
    for (std::size_t k = b0; k < b1; ++k) {
      tf.push_back(store.image(triplets[k].target));
      sf.push_back(store.image(triplets[k].source));
      nf.push_back(store.image(triplets[k].impostor));
    }
    const auto xt = to_batch<float>(tf), xs = to_batch<float>(sf), xn = to_batch<float>(nf);
    const Tensor<float> xc = model.swap(xt, xs);
    if (xc.shape() != xt.shape()) throw ShapeMismatch("swap model changed the batch shape");
    const auto ft = detail::block_features(backbone, xt, first, last);
    const auto fs = detail::block_features(backbone, xs, first, last);
    const auto fn = detail::block_features(backbone, xn, first, last);
    const auto fc = detail::block_features(backbone, xc, first, last);
    for (int j = 0; j < nb; ++j) {
      const auto c2t = detail::rowwise_cosine_distance(fc[j], ft[j]);
      const auto c2s = detail::rowwise_cosine_distance(fc[j], fs[j]);
      const auto neg = detail::rowwise_cosine_distance(ft[j], fn[j]);
      for (std::size_t k = b0; k < b1; ++k) {
        auto& d = out[k * static_cast<std::size_t>(nb) + static_cast<std::size_t>(j)];
        d = {first + j, c2t[k - b0], c2s[k - b0], neg[k - b0]};
      }
    }
  }
  return out;
}

inline std::map<int, std::vector<DistanceSample>> group_by_block(const std::vector<DistanceSample>& samples) {
  std::map<int, std::vector<DistanceSample>> g;
  for (const auto& s : samples) g[s.block_index].push_back(s);
  return g;
}

// m_i = mean of the c2t distances at block i.
inline IFSRMargins derive_margins(const std::vector<DistanceSample>& samples, int first_block,
                                  int last_block, const std::string& swap_model_id,
                                  const std::string& backbone_id) {
  const auto g = group_by_block(samples);
  IFSRMargins m;
  m.swap_model_id = swap_model_id;
  m.backbone_id = backbone_id;
  for (int b = first_block; b <= last_block; ++b) {
    const auto it = g.find(b);
    if (it == g.end() || it->second.empty())
      throw EmptyBlock("no distance samples for block " + std::to_string(b));
    double acc = 0;
    for (const auto& s : it->second) acc += s.c2t;
    m.margins[b] = std::clamp(acc / static_cast<double>(it->second.size()), 0.0, 2.0);
    m.n_samples[b] = static_cast<std::int64_t>(it->second.size());
    m.sample_count = std::max(m.sample_count, m.n_samples[b]);
  }
  return m;
}

inline IFSRMargins derive_margins(const std::vector<DistanceSample>& samples,
                                  const std::string& swap_model_id, const std::string& backbone_id) {
  if (samples.empty()) throw EmptyBlock("no distance samples");
  const auto g = group_by_block(samples);
  return derive_margins(samples, g.begin()->first, g.rbegin()->first, swap_model_id, backbone_id);
}

// Genuine scores are the low-distance class. At threshold t,
// FAR(t) = #{impostor < t} / |impostor| and FRR(t) = #{genuine >= t} / |genuine|.
// t sweeps the merged support plus +inf; the result is the crossing of the two
// step curves, linearly interpolated between adjacent thresholds.
inline double compute_eer(std::vector<double> genuine, std::vector<double> impostor) {
  if (genuine.empty() || impostor.empty()) throw EmptyDistribution("EER needs both distributions");
  std::sort(genuine.begin(), genuine.end());
  std::sort(impostor.begin(), impostor.end());
  std::vector<double> ts;
  ts.reserve(genuine.size() + impostor.size() + 1);
  std::merge(genuine.begin(), genuine.end(), impostor.begin(), impostor.end(), std::back_inserter(ts));
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  ts.push_back(std::numeric_limits<double>::infinity());

  const double ng = static_cast<double>(genuine.size()), ni = static_cast<double>(impostor.size());
  double prev_far = 0, prev_frr = 1;
  bool have_prev = false;
  for (double t : ts) {
    const double far =
        static_cast<double>(std::lower_bound(impostor.begin(), impostor.end(), t) - impostor.begin()) / ni;
    const double frr =
        static_cast<double>(genuine.end() - std::lower_bound(genuine.begin(), genuine.end(), t)) / ng;
    const double diff = far - frr;
    if (diff >= 0) {
      if (diff == 0 || !have_prev) return far;
      const double prev_diff = prev_far - prev_frr;
      const double a = -prev_diff / (diff - prev_diff);
      return prev_far + a * (far - prev_far);
    }
    prev_far = far;
    prev_frr = frr;
    have_prev = true;
  }
  return 1.0;  // unreachable: at +inf FAR = 1 and FRR = 0
}

// c2t against c2s per block.
inline EERCurve compute_eer_curve(const std::vector<DistanceSample>& samples) {
  EERCurve curve;
  for (const auto& [b, v] : group_by_block(samples)) {
    std::vector<double> g, i;
    for (const auto& s : v) {
      g.push_back(s.c2t);
      i.push_back(s.c2s);
    }
    curve[b] = compute_eer(std::move(g), std::move(i));
  }
  return curve;
}

inline constexpr int kHistogramBins = 50;

inline std::vector<std::int64_t> histogram_0_2(const std::vector<double>& xs) {
  std::vector<std::int64_t> h(kHistogramBins, 0);
  for (double x : xs) {
    int k = static_cast<int>(std::floor(x / 2.0 * kHistogramBins));
    h[static_cast<std::size_t>(std::clamp(k, 0, kHistogramBins - 1))] += 1;
  }
  return h;
}

struct BlockSummary {
  int block_index = 0;
  std::int64_t n = 0;
  double mean_c2t = 0, mean_c2s = 0, mean_neg = 0;
  double eer = 0;
  std::vector<std::int64_t> hist_c2t, hist_c2s, hist_neg;

  friend bool operator==(const BlockSummary&, const BlockSummary&) = default;
};

struct CalibrationReport {
  static constexpr int kSchemaVersion = 1;
  std::string swap_model_id, backbone_id;
  std::int64_t n_triplets = 0;
  std::uint64_t seed = 0;
  std::vector<BlockSummary> blocks;
  std::map<std::string, std::string> extra;

  EERCurve eer_curve() const {
    EERCurve c;
    for (const auto& b : blocks) c[b.block_index] = b.eer;
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json bl = nlohmann::json::array();
    for (const auto& b : blocks)
      bl.push_back({{"block_index", b.block_index}, {"n", b.n},             {"mean_c2t", b.mean_c2t},
                    {"mean_c2s", b.mean_c2s},       {"mean_neg", b.mean_neg}, {"eer", b.eer},
                    {"hist_c2t", b.hist_c2t},       {"hist_c2s", b.hist_c2s}, {"hist_neg", b.hist_neg}});
    nlohmann::json eer = nlohmann::json::array();
    for (const auto& b : blocks) eer.push_back({b.block_index, b.eer});
    return {{"kind", "ifsr_calibration"},
            {"schema_version", kSchemaVersion},
            {"swap_model_id", swap_model_id},
            {"backbone_id", backbone_id},
            {"n_triplets", n_triplets},
            {"seed", seed},
            {"histogram", {{"bins", kHistogramBins}, {"lo", 0.0}, {"hi", 2.0}}},
            {"blocks", bl},
            {"eer_series", eer},
            {"extra", extra}};
  }

  static CalibrationReport from_json(const nlohmann::json& j) {
    try {
      if (j.at("kind") != "ifsr_calibration") throw ParseError("not a calibration report");
      if (j.at("schema_version").get<int>() != kSchemaVersion)
        throw ParseError("unsupported calibration report schema");
      CalibrationReport r;
      r.swap_model_id = j.at("swap_model_id");
      r.backbone_id = j.at("backbone_id");
      r.n_triplets = j.at("n_triplets");
      r.seed = j.at("seed");
      r.extra = j.at("extra").get<std::map<std::string, std::string>>();
      for (const auto& b : j.at("blocks")) {
        BlockSummary s;
        s.block_index = b.at("block_index");
        s.n = b.at("n");
        s.mean_c2t = b.at("mean_c2t");
        s.mean_c2s = b.at("mean_c2s");
        s.mean_neg = b.at("mean_neg");
        s.eer = b.at("eer");
        s.hist_c2t = b.at("hist_c2t").get<std::vector<std::int64_t>>();
        s.hist_c2s = b.at("hist_c2s").get<std::vector<std::int64_t>>();
        s.hist_neg = b.at("hist_neg").get<std::vector<std::int64_t>>();
        r.blocks.push_back(std::move(s));
      }
      return r;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed calibration report: ") + e.what());
    }
  }

  friend bool operator==(const CalibrationReport&, const CalibrationReport&) = default;
};

inline CalibrationReport summarize(const std::vector<DistanceSample>& samples, const EERCurve& eer) {
  CalibrationReport r;
  for (const auto& [b, v] : group_by_block(samples)) {
    BlockSummary s;
    s.block_index = b;
    s.n = static_cast<std::int64_t>(v.size());
    std::vector<double> t, c, n;
    for (const auto& d : v) {
      t.push_back(d.c2t);
      c.push_back(d.c2s);
      n.push_back(d.neg);
    }
    auto mean_of = [](const std::vector<double>& x) {
      double a = 0;
      for (double e : x) a += e;
      return a / static_cast<double>(x.size());
    };
    s.mean_c2t = mean_of(t);
    s.mean_c2s = mean_of(c);
    s.mean_neg = mean_of(n);
    const auto it = eer.find(b);
    if (it == eer.end()) throw EmptyBlock("no EER value for block " + std::to_string(b));
    s.eer = it->second;
    s.hist_c2t = histogram_0_2(t);
    s.hist_c2s = histogram_0_2(c);
    s.hist_neg = histogram_0_2(n);
    r.blocks.push_back(std::move(s));
  }
  return r;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw ImageIOError("cannot write " + tmp);
    f << text;
  }
  std::filesystem::rename(tmp, path);
}

// Writes the JSON report and the margins table. Block ranges must agree.
inline CalibrationReport emit_report(const std::vector<DistanceSample>& samples, const IFSRMargins& margins,
                                     const EERCurve& eer, const std::filesystem::path& report_path,
                                     const std::filesystem::path& margins_path) {
  CalibrationReport r = summarize(samples, eer);
  for (const auto& b : r.blocks)
    if (!margins.margins.count(b.block_index))
      throw ShapeMismatch("margins do not cover block " + std::to_string(b.block_index));
  if (margins.margins.size() != r.blocks.size())
    throw ShapeMismatch("margins and samples cover different block ranges");
  r.swap_model_id = margins.swap_model_id;
  r.backbone_id = margins.backbone_id;
  r.n_triplets = margins.sample_count;
  r.extra = margins.extra;
  write_text_atomic(report_path, r.to_json().dump(2) + "\n");
  write_margins(margins_path, margins);
  return r;
}

inline CalibrationReport read_calibration_report(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FileNotFound("no such report: " + path.string());
  try {
    return CalibrationReport::from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("report is not JSON: ") + e.what());
  }
}

}  // namespace facedancer
