// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <CLI11.hpp>
#include <opencv2/core.hpp>

#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "facedancer/config.hpp"
#include "facedancer/eval_suite.hpp"
#include "facedancer/ifsr_calibration.hpp"
#include "facedancer/plot.hpp"
#include "facedancer/synthetic.hpp"
#include "facedancer/trainer.hpp"

namespace facedancer {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Commands. Each one is callable directly; run_cli only does argument parsing
// and error-to-exit-code mapping.

// Image plus optional sidecar -> aligned face; no sidecar means pre-aligned.
inline AlignedFace load_aligned(const fs::path& image, std::int64_t resolution,
                                const FaceTemplate& tmpl = arcface_template()) {
  const Tensor<float> img = read_image(image);
  const fs::path side = landmark_sidecar(image);
  return fs::exists(side) ? align_face(img, read_landmarks(side), resolution, tmpl)
                          : from_prealigned(img, resolution);
}

// Mirrors <in>/<identity>/<image> into <out> as aligned PNG crops.
inline std::size_t align_command(const fs::path& in, const fs::path& out, std::int64_t resolution,
                                 const std::optional<fs::path>& template_path) {
  const FaceTemplate tmpl = template_path ? read_template(*template_path) : arcface_template();
  if (!fs::is_directory(in)) throw FileNotFound("no such input directory: " + in.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw EmptyDataset("no images found under " + in.string());
  for (const auto& f : files) {
    const AlignedFace face = load_aligned(f, resolution, tmpl);
    fs::path rel = fs::relative(f, in);
    rel.replace_extension(".png");
    write_image(out / rel, face.pixels);
  }
  return files.size();
}

struct CalibrateArgs {
  std::string swap_model = "identity";  // identity | source | checkpoint path
  std::string backbone = "stub";
  fs::path data, out, report;
  std::size_t n = 1000;
  std::uint64_t seed = 20220101;
  int resolution = 64;
  int first_block = 1, last_block = -1;
  std::size_t batch_size = 8;
};

inline CalibrationReport calibrate_command(const CalibrateArgs& a) {
  const auto backbone = make_backbone<float>(a.backbone);
  SwapModel model;
  int res = a.resolution;
  if (a.swap_model == "identity") {
    model = identity_passthrough_model();
  } else if (a.swap_model == "source") {
    model = source_passthrough_model();
  } else {
    TrainState s = read_checkpoint(a.swap_model);
    res = s.generator->config().resolution;
    model = generator_swap_model(std::shared_ptr<const Generator<float>>(std::move(s.generator)), backbone,
                                 fs::path(a.swap_model).filename().string() + "@" + std::to_string(s.step));
  }
  const FaceStore store = load_face_store(a.data, res);
  const auto samples = collect_distances(model, *backbone, store, a.n, a.seed,
                                         {a.first_block, a.last_block, a.batch_size});
  IFSRMargins m = derive_margins(samples, model.id, a.backbone);
  m.extra["seed"] = std::to_string(a.seed);
  const fs::path report = a.report.empty() ? fs::path(a.out).replace_extension(".json") : a.report;
  return emit_report(samples, m, compute_eer_curve(samples), report, a.out);
}

struct TrainArgs {
  std::string config = "configB";
  fs::path data, out, resume;
  std::string margins;
  std::int64_t steps = 2000;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

inline std::vector<StepReport> train_command(const TrainArgs& a, std::ostream& log) {
  std::vector<std::string> ov = a.overrides;
  if (!a.margins.empty()) ov.push_back("margins=" + a.margins);
  if (a.seed) ov.push_back("seed=" + std::to_string(*a.seed));
  TrainState s = a.resume.empty() ? TrainState::create(load_train_options(a.config, ov))
                                  : read_checkpoint(a.resume);
  const FaceStore store = load_face_store(a.data, s.options.resolution);
  const auto ctx = TrainContext::from_options(s.options);
  fs::create_directories(a.out);
  detail::write_file(a.out / "config.cfg", format_config(s.options));
  const std::int64_t every = std::max<std::int64_t>(1, a.steps / 20);
  return train(s, store, ctx, {a.steps, a.out, [&](const StepReport& r) {
                                 if (r.step % every == 0)
                                   log << "step " << r.step << " g " << r.g.total << " d " << r.d_total << '\n';
                               }});
}

// X_c = G(x_t, I(x_s)), written as an 8-bit image.
inline void swap_command(const fs::path& target, const fs::path& source, const fs::path& checkpoint,
                         const fs::path& out, std::string* stage = nullptr) {
  auto at = [&](const char* s) {
    if (stage) *stage = s;
  };
  at("load-checkpoint");
  const TrainState s = read_checkpoint(checkpoint);
  const int res = s.generator->config().resolution;
  at("load-backbone");
  const auto backbone = make_backbone<float>(s.options.backbone);
  at("align-target");
  const AlignedFace t = load_aligned(target, res);
  at("align-source");
  const AlignedFace src = load_aligned(source, res);
  at("generate");
  NoGrad ng;
  const auto xs = Var<float>::constant(src.pixels.reshaped(Shape{1, 3, res, res}));
  const auto xt = Var<float>::constant(t.pixels.reshaped(Shape{1, 3, res, res}));
  const Tensor<float> img = (*s.generator)(xt, backbone->embed_batch(xs)).value();
  for (float v : img.span())
    if (!std::isfinite(v)) throw NonFiniteLoss("generator produced a non-finite pixel");
  at("write");
  write_image(out, img.reshaped(Shape{3, res, res}));
  at("");
}

struct EvaluateArgs {
  fs::path swapped, reference, out;
  std::optional<fs::path> gallery;
  std::string backbone = "stub", perceptual = "stub";
  int resolution = 64;
};

inline MetricReport evaluate_command(const EvaluateArgs& a) {
  EvalAdapters ad;
  ad.identity = make_backbone<float>(a.backbone);
  ad.pose = StubEstimator::pose();
  ad.expression = StubEstimator::expression();
  ad.fid = make_perceptual<float>(a.perceptual);
  MetricReport r = evaluate(a.swapped, a.reference, a.gallery, ad, a.resolution);
  write_metric_report(a.out, r);
  return r;
}

// A ".jsonl" input is a training log; anything else is a calibration report.
inline std::vector<fs::path> plot_command(const fs::path& input, const fs::path& out_dir,
                                          const fs::path& mask_dir = {}) {
  if (input.extension() == ".jsonl") {
    const auto log = read_log(input);
    fs::path masks = mask_dir;
    if (masks.empty() && fs::is_directory(input.parent_path() / "masks")) masks = input.parent_path() / "masks";
    return plot_training_log(log, out_dir, masks);
  }
  return plot_calibration(read_calibration_report(input), out_dir);
}

inline std::string config_show(const std::string& name, int resolution) {
  return format_config(load_train_options(name, {"resolution=" + std::to_string(resolution)}));
}

// ---------------------------------------------------------------------------

inline void print_error(std::ostream& err, const std::string& name, int code, const std::string& stage,
                        const std::string& message) {
  nlohmann::json j{{"error", name}, {"exit_code", code}, {"message", message}};
  if (!stage.empty()) j["stage"] = stage;
  err << j.dump() << '\n';
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"FaceDancer face swapping toolkit"};
  app.require_subcommand(1);
  std::string stage;

  auto* version = app.add_subcommand("version", "print the version");

  auto* cfg = app.add_subcommand("config", "preset introspection");
  auto* show = cfg->add_subcommand("show", "print the effective configuration of a preset or file");
  cfg->require_subcommand(1);
  std::string show_name;
  int show_res = 256;
  show->add_option("name", show_name, "preset name or config file")->required();
  show->add_option("--resolution", show_res, "working resolution");

  auto* synth = app.add_subcommand("make-synthetic", "write a synthetic face dataset");
  fs::path synth_out;
  std::size_t synth_ids = 10, synth_per = 20;
  std::int64_t synth_size = 96;
  std::uint64_t synth_seed = 20220101;
  bool synth_nolm = false;
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--identities", synth_ids);
  synth->add_option("--per-identity", synth_per);
  synth->add_option("--size", synth_size);
  synth->add_option("--seed", synth_seed);
  synth->add_flag("--no-landmarks", synth_nolm, "omit landmark sidecars");

  auto* align = app.add_subcommand("align", "align a dataset onto the face template");
  fs::path al_in, al_out;
  std::int64_t al_res = 256;
  std::optional<fs::path> al_tmpl;
  align->add_option("--in", al_in)->required();
  align->add_option("--out", al_out)->required();
  align->add_option("--resolution", al_res);
  align->add_option("--template", al_tmpl);

  auto* cal = app.add_subcommand("calibrate-ifsr", "measure per-block distances and derive margins");
  CalibrateArgs ca;
  cal->add_option("--swap-model", ca.swap_model, "identity, source, or a checkpoint path");
  cal->add_option("--backbone", ca.backbone);
  cal->add_option("--data", ca.data)->required();
  cal->add_option("--n", ca.n);
  cal->add_option("--out", ca.out)->required();
  cal->add_option("--report", ca.report);
  cal->add_option("--seed", ca.seed);
  cal->add_option("--resolution", ca.resolution);
  cal->add_option("--first-block", ca.first_block);
  cal->add_option("--last-block", ca.last_block);
  cal->add_option("--batch-size", ca.batch_size);

  auto* tr = app.add_subcommand("train", "train a generator/discriminator pair");
  TrainArgs ta;
  std::uint64_t tr_seed = 0;
  tr->add_option("--config", ta.config, "preset name or config file");
  tr->add_option("--data", ta.data)->required();
  tr->add_option("--margins", ta.margins);
  tr->add_option("--steps", ta.steps);
  tr->add_option("--out", ta.out)->required();
  tr->add_option("--resume", ta.resume, "continue from a checkpoint");
  auto* seed_opt = tr->add_option("--seed", tr_seed);
  tr->add_option("--set", ta.overrides, "key=value override")->allow_extra_args(false);

  auto* sw = app.add_subcommand("swap", "swap the source identity onto the target face");
  fs::path sw_t, sw_s, sw_ck, sw_out;
  sw->add_option("--target", sw_t)->required();
  sw->add_option("--source", sw_s)->required();
  sw->add_option("--checkpoint", sw_ck)->required();
  sw->add_option("--out", sw_out)->required();

  auto* ev = app.add_subcommand("evaluate", "identity, pose, expression and FID metrics");
  EvaluateArgs ea;
  ev->add_option("--swapped", ea.swapped)->required();
  ev->add_option("--reference", ea.reference)->required();
  ev->add_option("--gallery", ea.gallery);
  ev->add_option("--out", ea.out)->required();
  ev->add_option("--backbone", ea.backbone);
  ev->add_option("--perceptual", ea.perceptual);
  ev->add_option("--resolution", ea.resolution);

  auto* pl = app.add_subcommand("plot", "render figures from a training log or calibration report");
  fs::path pl_in, pl_out, pl_masks;
  pl->add_option("input", pl_in, "metrics.jsonl or calibration report")->required();
  pl->add_option("--out", pl_out)->required();
  pl->add_option("--masks", pl_masks, "directory of exported AFFA masks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    print_error(err, "UsageError", 1, "", e.what());
    return 1;
  }

  try {
    if (*version) {
      out << "facedancer " << kVersion << '\n';
    } else if (*show) {
      out << config_show(show_name, show_res);
    } else if (*synth) {
      write_synthetic_dataset(synth_out, synth_ids, synth_per, synth_size, synth_seed, !synth_nolm);
      out << "wrote " << synth_ids * synth_per << " images to " << synth_out.string() << '\n';
    } else if (*align) {
      const auto n = align_command(al_in, al_out, al_res, al_tmpl);
      out << "aligned " << n << " images\n";
    } else if (*cal) {
      const auto r = calibrate_command(ca);
      for (const auto& b : r.blocks) out << "block " << b.block_index << " eer " << b.eer << '\n';
    } else if (*tr) {
      if (seed_opt->count()) ta.seed = tr_seed;
      const auto r = train_command(ta, out);
      if (!r.empty()) out << "finished at step " << r.back().step + 1 << '\n';
    } else if (*sw) {
      swap_command(sw_t, sw_s, sw_ck, sw_out, &stage);
    } else if (*ev) {
      out << evaluate_command(ea).to_json().dump(2) << '\n';
    } else if (*pl) {
      for (const auto& f : plot_command(pl_in, pl_out, pl_masks)) out << f.string() << '\n';
    }
    return 0;
  } catch (const Error& e) {
    print_error(err, e.name(), e.exit_code(), stage, e.what());
    return e.exit_code();
  } catch (const cv::Exception& e) {
    print_error(err, "ImageIOError", 3, stage, e.what());
    return 3;
  } catch (const std::exception& e) {
    print_error(err, "InternalError", 1, stage, e.what());
    return 1;
  }
}

}  // namespace facedancer
