// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "facedancer/synthetic.hpp"
#include "facedancer/trainer.hpp"

using namespace facedancer;
namespace fs = std::filesystem;

namespace {

const FaceStore& store() {
  static const FaceStore s = make_synthetic_store(4, 3, 64, 5);
  return s;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("facedancer_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path margins_file() {
  static const fs::path p = [] {
    const auto dir = scratch("margins");
    IFSRMargins m;
    for (int b = 2; b <= 7; ++b) {
      m.margins[b] = 0.05 * b;
      m.n_samples[b] = 1;
    }
    write_margins(dir / "m.tsv", m);
    return dir / "m.tsv";
  }();
  return p;
}

TrainOptions tiny(const std::string& preset = "configB") {
  return load_train_options(preset, {"resolution=64", "base_channels=8", "channel_cap=16",
                                     "batch_size=2", "margins=" + margins_file().string()});
}

std::vector<double> totals(const std::vector<StepReport>& r) {
  std::vector<double> t;
  for (const auto& x : r) {
    t.push_back(x.g.total);
    t.push_back(x.d_total);
  }
  return t;
}

}  // namespace

TEST_CASE("learning-rate schedule", "[trainer]") {
  const OptimizerSpec s;
  CHECK(lr_at(0, s) == 1e-4);
  CHECK(lr_at(99999, s) == 1e-4);
  CHECK(lr_at(100000, s) == 9.7e-5);
  CHECK(lr_at(200000, s) == 9.409e-5);
  OptimizerSpec c = s;
  c.decay_mode = DecayMode::Continuous;
  CHECK(lr_at(50000, c) == Catch::Approx(1e-4 * std::sqrt(0.97)));
  CHECK_THROWS_AS(lr_at(-1, s), UsageError);
}

TEST_CASE("adam first step moves by lr times the gradient sign", "[trainer]") {
  Adam<double> opt{OptimizerSpec{}};
  auto p = Var<double>::leaf(Tensor<double>(Shape{3}, std::vector<double>{1, -2, 3}));
  const auto g = Var<double>::constant(Tensor<double>(Shape{3}, std::vector<double>{0.5, -4, 1e-3}));
  opt.step({p}, {g}, 0.1);
  CHECK(p.value()[0] == Catch::Approx(0.9).epsilon(1e-6));
  CHECK(p.value()[1] == Catch::Approx(-1.9).epsilon(1e-6));
  CHECK(p.value()[2] == Catch::Approx(2.9).epsilon(1e-4));
  CHECK(opt.steps() == 1);
}

TEST_CASE("run configuration files", "[trainer][config]") {
  const auto o = load_train_options("configE");
  CHECK_FALSE(o.model().use_mapping);
  CHECK_THROWS_AS(load_train_options("configB", {"lambda_x=1"}), UnknownKey);
  CHECK_THROWS_AS(load_train_options("configB", {"batch_size=zero"}), UsageError);
  const auto dir = scratch("config");
  {
    std::ofstream f(dir / "base.cfg");
    f << "inherit = configC\nresolution = 128\nlambda_i = 3 # comment\n";
    std::ofstream g(dir / "child.cfg");
    g << "inherit = base.cfg\nbatch_size = 7\n";
    std::ofstream b(dir / "bad.cfg");
    b << "inherit = configA\nlearning_rate = 1\n";
  }
  const auto c = load_train_options((dir / "child.cfg").string(), {"seed=9"});
  CHECK(c.preset == "configC");
  CHECK(c.resolution == 128);
  CHECK(c.weights.lambda_i == 3);
  CHECK(c.batch_size == 7);
  CHECK(c.seed == 9u);
  CHECK_THROWS_AS(load_train_options((dir / "bad.cfg").string()), UnknownKey);
  CHECK_THROWS_AS(load_train_options((dir / "missing.cfg").string()), FileNotFound);
  const auto back = parse_train_options(format_config(c));
  CHECK(back.model() == c.model());
  CHECK(format_config(back) == format_config(c));
}

TEST_CASE("train step contract", "[trainer]") {
  const auto o = tiny();
  const auto ctx = TrainContext::from_options(o);
  auto s = TrainState::create(o);
  const auto before = ctx.backbone->checksum();
  const auto pbefore = ctx.perceptual->checksum();
  Rng rng(1);
  const auto batch = sample_batch(store(), 2, 0.2, rng);
  const auto r = train_step(s, batch, o.weights, ctx);
  CHECK(s.step == 1);
  for (const char* k : {"adv", "id", "rec", "perc", "cycle", "ifsr"}) CHECK(r.g.terms.count(k) == 1);
  CHECK(r.g.total == Catch::Approx(r.g.recompute_total()));
  CHECK(std::isfinite(r.d_total));
  CHECK(r.mask_means.size() == 3u);
  CHECK(ctx.backbone->checksum() == before);
  CHECK(ctx.perceptual->checksum() == pbefore);

  auto a = tiny("configA");
  const auto sa = TrainState::create(a);
  CHECK_FALSE(sa.margins.has_value());
  auto nom = tiny();
  nom.margins.clear();
  CHECK_THROWS_AS(TrainState::create(nom), MissingMargin);

  // A poisoned parameter surfaces as a diagnosable error before any update.
  auto bad = TrainState::create(o);
  bad.generator->params().at("head.bias").mutable_value().fill(std::nanf(""));
  CHECK_THROWS_AS(train_step(bad, batch, o.weights, ctx), NonFiniteLoss);
}

TEST_CASE("reconstruction overfit", "[trainer][slow]") {
  auto o = tiny("configA");
  o.weights = LossWeights{0, 5, 0, 0, 0, 0, 0};
  const auto ctx = TrainContext::from_options(o);
  auto s = TrainState::create(o);
  Rng rng(3);
  auto batch = sample_batch(store(), 2, 1.0, rng);
  std::vector<double> rec;
  for (int k = 0; k < 200; ++k) rec.push_back(train_step(s, batch, o.weights, ctx).g.terms.at("rec"));
  CHECK(rec.back() < 0.5 * rec.front());
  int rises = 0;
  for (std::size_t k = 10; k < rec.size(); k += 10) rises += rec[k] >= rec[k - 10];
  CHECK(rises == 0);
}

TEST_CASE("determinism and resumption", "[trainer]") {
  const auto o = tiny();
  const auto ctx = TrainContext::from_options(o);
  auto a = TrainState::create(o);
  auto b = TrainState::create(o);
  const auto ra = train(a, store(), ctx, {4, {}, {}});
  const auto rb = train(b, store(), ctx, {4, {}, {}});
  CHECK(totals(ra) == totals(rb));

  const auto dir = scratch("resume");
  auto c = TrainState::create(o);
  train(c, store(), ctx, {2, {}, {}});
  save_checkpoint(c, dir / "c.fdck");
  auto d = read_checkpoint(dir / "c.fdck");
  CHECK(d.step == 2);
  for (std::size_t i = 0; i < c.generator->params().size(); ++i)
    CHECK(c.generator->params().named()[i].second.value() == d.generator->params().named()[i].second.value());
  CHECK(d.opt_g == c.opt_g);
  CHECK(d.opt_d == c.opt_d);
  CHECK(d.rng == c.rng);
  const auto rd = train(d, store(), ctx, {2, {}, {}});
  const auto full = totals(ra);
  CHECK(totals(rd) == std::vector<double>(full.begin() + 4, full.end()));

  // Corrupt files leave the target state alone.
  {
    std::fstream f(dir / "c.fdck", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-40, std::ios::end);
    f.put('\x7f');
  }
  const auto snapshot = d.generator->params().checksum();
  CHECK_THROWS_AS(load_checkpoint(d, dir / "c.fdck"), CheckpointCorrupt);
  CHECK(d.generator->params().checksum() == snapshot);
  CHECK(d.step == 4);
  CHECK_THROWS_AS(load_checkpoint(d, dir / "absent.fdck"), CheckpointNotFound);
}

TEST_CASE("loop outputs", "[trainer]") {
  auto o = tiny();
  o.mask_every = 2;
  o.checkpoint_every = 2;
  const auto ctx = TrainContext::from_options(o);
  auto s = TrainState::create(o);
  const auto dir = scratch("loop");
  const auto reps = train(s, store(), ctx, {3, dir, {}});
  const auto log = read_log(dir / "metrics.jsonl");
  REQUIRE(log.size() == 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(log[i].step == static_cast<std::int64_t>(i));
    CHECK(log[i].g.terms == reps[i].g.terms);
  }
  CHECK(fs::exists(dir / "checkpoint.fdck"));
  CHECK(read_checkpoint(dir / "checkpoint.fdck").step == 3);
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(dir / "masks")) pngs += e.path().extension() == ".png";
  CHECK(pngs == 3);
}
