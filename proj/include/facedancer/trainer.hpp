// SPDX-License-Identifier: Apache-2.0
//
// Alternating critic / generator optimization, checkpoints and logs.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "facedancer/archive.hpp"
#include "facedancer/config.hpp"
#include "facedancer/discriminator.hpp"
#include "facedancer/face_pipeline.hpp"
#include "facedancer/generator.hpp"
#include "facedancer/image_io.hpp"
#include "facedancer/objectives.hpp"

namespace facedancer {

inline double lr_at(std::int64_t step, const OptimizerSpec& spec) {
  if (step < 0) throw UsageError("step must be non-negative");
  if (spec.decay_mode == DecayMode::Continuous)
    return spec.lr0 * std::pow(spec.decay, static_cast<double>(step) / static_cast<double>(spec.decay_every));
  double lr = spec.lr0;
  for (std::int64_t k = step / spec.decay_every; k > 0; --k) lr *= spec.decay;
  return lr;
}

// Adam with bias correction; one instance per parameter set.
template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(OptimizerSpec spec) : spec_(spec) {}

  std::int64_t steps() const { return t_; }

  void step(const std::vector<Var<T>>& params, const std::vector<Var<T>>& grads, double lr) {
    if (params.size() != grads.size()) throw ShapeMismatch("parameter and gradient counts differ");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
      }
    }
    if (m_.size() != params.size()) throw ShapeMismatch("optimizer state does not match parameters");
    ++t_;
    const double b1 = spec_.beta1, b2 = spec_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& w = const_cast<Var<T>&>(params[i]).mutable_value();
      const Tensor<T>& g = grads[i].value();
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (std::int64_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        m[k] = static_cast<T>(b1 * m[k] + (1 - b1) * gk);
        v[k] = static_cast<T>(b2 * v[k] + (1 - b2) * gk * gk);
        const double mh = m[k] / c1, vh = v[k] / c2;
        w[k] = static_cast<T>(w[k] - lr * mh / (std::sqrt(vh) + spec_.eps));
      }
    }
  }

  void save(TensorArchive& ar, const std::string& prefix, const ParamStore<T>& names) const {
    ar.meta[prefix + "steps"] = t_;
    for (std::size_t i = 0; i < m_.size(); ++i) {
      ar.put(prefix + "m/" + names.named()[i].first, m_[i]);
      ar.put(prefix + "v/" + names.named()[i].first, v_[i]);
    }
  }

  void load(const TensorArchive& ar, const std::string& prefix, const ParamStore<T>& names) {
    t_ = ar.meta.at(prefix + "steps").get<std::int64_t>();
    m_.clear();
    v_.clear();
    if (t_ == 0) return;
    for (const auto& [name, p] : names.named()) {
      m_.push_back(ar.get<T>(prefix + "m/" + name));
      v_.push_back(ar.get<T>(prefix + "v/" + name));
      if (m_.back().shape() != p.shape() || v_.back().shape() != p.shape())
        throw CheckpointCorrupt("optimizer moment shape mismatch for " + name);
    }
  }

  friend bool operator==(const Adam& a, const Adam& b) { return a.t_ == b.t_ && a.m_ == b.m_ && a.v_ == b.v_; }

 private:
  OptimizerSpec spec_;
  std::int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Frozen networks used by the losses.
struct TrainContext {
  std::shared_ptr<const BackboneAdapter<float>> backbone;
  std::shared_ptr<const PerceptualAdapter<float>> perceptual;

  static TrainContext from_options(const TrainOptions& o) {
    return {make_backbone<float>(o.backbone), make_perceptual<float>(o.perceptual)};
  }
};

struct TrainState {
  TrainOptions options;
  std::int64_t step = 0;
  std::unique_ptr<Generator<float>> generator;
  std::unique_ptr<Discriminator<float>> discriminator;
  Adam<float> opt_g, opt_d;
  Rng rng;
  std::optional<IFSRMargins> margins;

  static TrainState create(const TrainOptions& o) {
    o.validate();
    TrainState s;
    s.options = o;
    const ModelConfig cfg = o.model();
    s.generator = std::make_unique<Generator<float>>(cfg, o.seed);
    s.discriminator = std::make_unique<Discriminator<float>>(cfg, o.seed + 1);
    s.opt_g = Adam<float>(o.optimizer);
    s.opt_d = Adam<float>(o.optimizer);
    s.rng = Rng(o.seed + 2);
    if (cfg.use_ifsr) {
      if (o.margins.empty()) throw MissingMargin("model " + cfg.name + " uses IFSR but no margins file is set");
      s.margins = read_margins(o.margins);
    }
    return s;
  }
};

struct StepReport {
  std::int64_t step = 0;  // the step this report belongs to, counted from 0
  double lr = 0;
  LossReport g;
  double d_hinge = 0, d_gp = 0, d_total = 0;
  std::map<int, double> mask_means;

  nlohmann::json to_json() const {
    nlohmann::json masks = nlohmann::json::object();
    for (const auto& [r, m] : mask_means) masks[std::to_string(r)] = m;
    return {{"step", step},     {"lr", lr},         {"g", g.to_json()},      {"d_hinge", d_hinge},
            {"d_gp", d_gp},     {"d_total", d_total}, {"affa_mask_mean", masks}};
  }

  static StepReport from_json(const nlohmann::json& j) {
    StepReport r;
    r.step = j.at("step");
    r.lr = j.at("lr");
    r.g.terms = j.at("g").at("terms").get<std::map<std::string, double>>();
    r.g.weights = j.at("g").at("weights").get<std::map<std::string, double>>();
    r.g.total = j.at("g").at("total");
    r.d_hinge = j.at("d_hinge");
    r.d_gp = j.at("d_gp");
    r.d_total = j.at("d_total");
    if (j.contains("affa_mask_mean"))
      for (const auto& [k, v] : j.at("affa_mask_mean").items()) r.mask_means[std::stoi(k)] = v.get<double>();
    return r;
  }
};

namespace detail {

inline Tensor<float> stack_faces(const std::vector<TrainingPair>& batch, bool target) {
  std::vector<AlignedFace> f;
  f.reserve(batch.size());
  for (const auto& p : batch) f.push_back(target ? p.target : p.source);
  return to_batch<float>(f);
}

inline std::string dump_terms(const std::map<std::string, Var<float>>& terms) {
  std::ostringstream os;
  for (const auto& [k, v] : terms) os << ' ' << k << '=' << v.item();
  return os.str();
}

}  // namespace detail

// One critic update on the detached swap, then one generator (and mapping)
// update on the weighted generator objective.
inline StepReport train_step(TrainState& s, const std::vector<TrainingPair>& batch, const LossWeights& w,
                             const TrainContext& ctx) {
  if (batch.empty()) throw EmptyDataset("empty training batch");
  const ModelConfig& cfg = s.generator->config();
  if (cfg.use_ifsr && w.lambda_ifsr > 0 && !s.margins)
    throw MissingMargin("IFSR is enabled but no margins are loaded");
  const auto& G = *s.generator;
  const auto& D = *s.discriminator;
  const auto& backbone = *ctx.backbone;

  const Tensor<float> xt_t = detail::stack_faces(batch, true), xs_t = detail::stack_faces(batch, false);
  std::vector<bool> same;
  for (const auto& p : batch) same.push_back(p.is_same);
  const Var<float> x_t = Var<float>::constant(xt_t), x_s = Var<float>::constant(xs_t);

  Var<float> z_s, z_t;
  {
    NoGrad ng;
    z_s = backbone.embed_batch(x_s);
    if (w.lambda_c > 0) z_t = backbone.embed_batch(x_t);
  }

  StepReport rep;
  rep.step = s.step;
  rep.lr = lr_at(s.step, s.options.optimizer);

  const GeneratorOutput<float> out = G.forward(x_t, z_s);
  const Var<float>& x_c = out.image;
  for (const auto& [r, m] : out.masks) {
    double acc = 0;
    for (float v : m.value().span()) acc += v;
    rep.mask_means[r] = acc / static_cast<double>(m.size());
  }

  // Critic. Without an adversarial term it cannot influence G and is left alone.
  if (w.lambda_adv > 0) {
    const auto d_params = D.params().vars();
    const Var<float> fake = detach(x_c);
    const Var<float> hinge = hinge_d_loss(D(x_t), D(fake));
    Var<float> d_loss = hinge;
    double gp_val = 0;
    if (w.lambda_gp > 0) {
      const std::function<Var<float>(const Var<float>&)> critic = [&D](const Var<float>& x) { return D(x); };
      const Var<float> gp = gradient_penalty(critic, xt_t, fake.value(), s.rng, s.options.gp_mode);
      gp_val = gp.item();
      d_loss = add(hinge, scale(gp, static_cast<float>(w.lambda_gp)));
    }
    rep.d_hinge = hinge.item();
    rep.d_gp = gp_val;
    rep.d_total = d_loss.item();
    if (!std::isfinite(rep.d_total))
      throw NonFiniteLoss("critic loss is not finite: hinge=" + std::to_string(rep.d_hinge) +
                          " gp=" + std::to_string(rep.d_gp));
    s.opt_d.step(d_params, grad(d_loss, d_params), rep.lr);
  }

  // Generator and mapping network.
  std::map<std::string, Var<float>> terms;
  if (w.lambda_adv > 0) terms["adv"] = hinge_g_loss(D(x_c));
  if (w.lambda_i > 0) terms["id"] = identity_loss(z_s, backbone.embed_batch(x_c));
  if (w.lambda_r > 0) terms["rec"] = reconstruction_loss(x_t, x_c, same);
  if (w.lambda_p > 0) terms["perc"] = perceptual_loss(x_t, x_c, same, *ctx.perceptual);
  if (w.lambda_c > 0) {
    const std::function<Var<float>(const Var<float>&, const Var<float>&)> gen =
        [&G](const Var<float>& x, const Var<float>& z) { return G(x, z); };
    terms["cycle"] = cycle_loss(x_t, x_c, z_t, gen);
  }
  if (cfg.use_ifsr && w.lambda_ifsr > 0)
    terms["ifsr"] = ifsr_loss(x_t, x_c, backbone, *s.margins, s.options.ifsr_scale, s.options.ifsr_literal);

  std::pair<Var<float>, LossReport> total;
  try {
    total = total_generator_loss(terms, w);
  } catch (const NonFiniteLoss& e) {
    throw NonFiniteLoss(std::string(e.what()) + " at step " + std::to_string(s.step) + ";" +
                        detail::dump_terms(terms));
  }
  rep.g = total.second;
  const auto g_params = s.generator->params().vars();
  s.opt_g.step(g_params, grad(total.first, g_params), rep.lr);
  ++s.step;
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointKind = "facedancer-checkpoint";

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  TensorArchive ar;
  ar.meta["kind"] = kCheckpointKind;
  ar.meta["step"] = s.step;
  ar.meta["model"] = to_json(s.generator->config());
  ar.meta["options"] = format_config(s.options);
  std::ostringstream rng;
  rng << s.rng;
  ar.meta["rng"] = rng.str();
  if (s.margins) ar.meta["margins"] = format_margins(*s.margins);
  for (const auto& [n, v] : s.generator->params().named()) ar.put("G/" + n, v.value());
  for (const auto& [n, v] : s.discriminator->params().named()) ar.put("D/" + n, v.value());
  s.opt_g.save(ar, "optG/", s.generator->params());
  s.opt_d.save(ar, "optD/", s.discriminator->params());
  ar.save(path);
}

// Builds a complete state from the file; the caller's state is only replaced
// once everything has been read and checked.
inline TrainState read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointNotFound("no such checkpoint: " + path.string());
  try {
    const TensorArchive ar = TensorArchive::load(path);
    if (ar.meta.value("kind", "") != kCheckpointKind) throw CheckpointCorrupt("not a checkpoint");
    TrainState s;
    s.options = parse_train_options(ar.meta.at("options").get<std::string>());
    const ModelConfig cfg = model_config_from_json(ar.meta.at("model"));
    if (cfg != s.options.model()) throw CheckpointCorrupt("checkpoint model and options disagree");
    s.generator = std::make_unique<Generator<float>>(cfg, s.options.seed);
    s.discriminator = std::make_unique<Discriminator<float>>(cfg, s.options.seed + 1);
    auto fill = [&](ParamStore<float>& ps, const std::string& prefix) {
      for (const auto& [n, v] : ps.named()) {
        Tensor<float> t = ar.get<float>(prefix + n);
        if (t.shape() != v.shape()) throw CheckpointCorrupt("shape mismatch for " + prefix + n);
        const_cast<Var<float>&>(v).mutable_value() = std::move(t);
      }
    };
    fill(s.generator->params(), "G/");
    fill(s.discriminator->params(), "D/");
    s.opt_g = Adam<float>(s.options.optimizer);
    s.opt_d = Adam<float>(s.options.optimizer);
    s.opt_g.load(ar, "optG/", s.generator->params());
    s.opt_d.load(ar, "optD/", s.discriminator->params());
    s.step = ar.meta.at("step").get<std::int64_t>();
    std::istringstream rng(ar.meta.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw CheckpointCorrupt("bad RNG state");
    if (ar.meta.contains("margins")) s.margins = parse_margins(ar.meta.at("margins").get<std::string>());
    return s;
  } catch (const CheckpointCorrupt&) {
    throw;
  } catch (const FileNotFound& e) {
    throw CheckpointNotFound(e.what());
  } catch (const std::exception& e) {
    throw CheckpointCorrupt("cannot read checkpoint " + path.string() + ": " + e.what());
  }
}

inline void load_checkpoint(TrainState& s, const std::filesystem::path& path) { s = read_checkpoint(path); }

// ---------------------------------------------------------------------------
// Logs and mask export

inline void append_log(const std::filesystem::path& path, const StepReport& r) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw ImageIOError("cannot append to " + path.string());
  f << r.to_json().dump() << '\n';
}

inline std::vector<StepReport> read_log(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FileNotFound("no such log: " + path.string());
  std::vector<StepReport> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(StepReport::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("bad log line: " + std::string(e.what()));
    }
  }
  return out;
}

// Writes the channel-averaged AFFA mask of the first sample at every fused
// level as masks/step<k>_<res>.png. Returns the files written.
inline std::vector<std::filesystem::path> export_masks(const Generator<float>& g, const AlignedFace& target,
                                                       const Tensor<float>& z_source,
                                                       const std::filesystem::path& dir, std::int64_t step) {
  NoGrad ng;
  const auto x = Var<float>::constant(to_batch<float>(std::span<const AlignedFace>(&target, 1)));
  const auto out = g.forward(x, Var<float>::constant(z_source.reshaped(Shape{1, kEmbeddingDim})));
  std::vector<std::filesystem::path> files;
  for (const auto& [r, m] : out.masks) {
    const Tensor<float>& mv = m.value();
    const std::int64_t c = mv.dim(1), h = mv.dim(2), wd = mv.dim(3);
    Tensor<float> avg(Shape{h, wd});
    for (std::int64_t k = 0; k < c; ++k)
      for (std::int64_t i = 0; i < h * wd; ++i) avg[i] += mv[k * h * wd + i] / static_cast<float>(c);
    const auto p = dir / ("step" + std::to_string(step) + "_" + std::to_string(r) + ".png");
    write_gray(p, avg);
    files.push_back(p);
  }
  return files;
}

// ---------------------------------------------------------------------------
// Loop

struct TrainLoopOptions {
  std::int64_t steps = 0;  // additional steps to run
  std::filesystem::path out_dir;  // empty: no files
  std::function<void(const StepReport&)> on_step;
};

inline std::vector<StepReport> train(TrainState& s, const FaceStore& store, const TrainContext& ctx,
                                     const TrainLoopOptions& loop) {
  std::vector<StepReport> reports;
  const AugmentConfig aug;
  const bool files = !loop.out_dir.empty();
  if (files) std::filesystem::create_directories(loop.out_dir);
  for (std::int64_t k = 0; k < loop.steps; ++k) {
    const auto batch = sample_batch(store, static_cast<std::size_t>(s.options.batch_size), s.options.same_prob,
                                    s.rng, s.options.augment ? &aug : nullptr);
    StepReport r = train_step(s, batch, s.options.weights, ctx);
    if (files) {
      append_log(loop.out_dir / "metrics.jsonl", r);
      if (s.options.mask_every > 0 && s.step % s.options.mask_every == 0 && !s.generator->config().fusion_plan.empty()) {
        const auto z = ctx.backbone->embed(batch.front().source);
        export_masks(*s.generator, batch.front().target, z, loop.out_dir / "masks", s.step);
      }
      if (s.options.checkpoint_every > 0 && s.step % s.options.checkpoint_every == 0)
        save_checkpoint(s, loop.out_dir / "checkpoint.fdck");
    }
    if (loop.on_step) loop.on_step(r);
    reports.push_back(std::move(r));
  }
  if (files) save_checkpoint(s, loop.out_dir / "checkpoint.fdck");
  return reports;
}

}  // namespace facedancer
