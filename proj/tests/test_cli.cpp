// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "facedancer/cli.hpp"

using namespace facedancer;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "facedancer");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("facedancer_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("config show matches the golden files", "[cli]") {
  for (const auto& name : preset_names()) {
    const auto r = cli({"config", "show", name});
    CHECK(r.code == 0);
    CHECK(r.out == slurp(fs::path(FACEDANCER_GOLDEN_DIR) / (name + ".cfg")));
  }
  CHECK(cli({"config", "show", "configE"}).out.find("use_mapping = false") != std::string::npos);
  CHECK(cli({"config", "show", "configA"}).out.find("use_ifsr = false") != std::string::npos);
  const auto b2 = cli({"config", "show", "baseline2"}).out;
  for (const char* r : {"256", "128", "64"})
    CHECK(b2.find(std::string("fusion.") + r + " = ADD") != std::string::npos);
}

TEST_CASE("exit codes follow the error classes", "[cli]") {
  CHECK(cli({"version"}).code == 0);
  CHECK(cli({}).code == 1);
  CHECK(cli({"train", "--bogus"}).code == 1);
  CHECK(cli({"config", "show", "configZ"}).code == 2);
  const auto dir = scratch("codes");
  const auto missing = cli({"swap", "--target", "a.png", "--source", "b.png", "--checkpoint",
                            (dir / "none.fdck").string(), "--out", (dir / "o.png").string()});
  CHECK(missing.code == 2);
  const auto j = nlohmann::json::parse(missing.err);
  CHECK(j["error"] == "CheckpointNotFound");
  CHECK(j["stage"] == "load-checkpoint");
  {
    std::ofstream f(dir / "bad.fdck");
    f << "not a checkpoint";
  }
  CHECK(cli({"swap", "--target", "a.png", "--source", "b.png", "--checkpoint", (dir / "bad.fdck").string(),
             "--out", (dir / "o.png").string()})
            .code == 3);
  CHECK(cli({"train", "--data", (dir / "nodata").string(), "--out", (dir / "run").string(), "--config",
             "configA", "--set", "lambda_q=1"})
            .code == 1);
}

TEST_CASE("plot outputs", "[cli][plot]") {
  const auto dir = scratch("plot");
  { std::ofstream f(dir / "empty.jsonl"); }
  const auto e = cli({"plot", (dir / "empty.jsonl").string(), "--out", (dir / "figs").string()});
  CHECK(e.code == 3);
  CHECK(nlohmann::json::parse(e.err)["error"] == "NoData");
  CHECK_FALSE(fs::exists(dir / "figs"));

  CalibrationReport r;
  r.swap_model_id = "m";
  r.backbone_id = "b";
  for (int b = 1; b <= 16; ++b) {
    BlockSummary s;
    s.block_index = b;
    s.n = 3;
    s.eer = 0.02 * b;
    s.hist_c2t.assign(kHistogramBins, 0);
    s.hist_c2s.assign(kHistogramBins, 0);
    s.hist_neg.assign(kHistogramBins, 0);
    s.hist_c2t[static_cast<std::size_t>(b)] = 3;
    s.hist_c2s[20] = 3;
    s.hist_neg[40] = 3;
    r.blocks.push_back(s);
  }
  write_text_atomic(dir / "report.json", r.to_json().dump(2));
  const auto ok = cli({"plot", (dir / "report.json").string(), "--out", (dir / "a").string()});
  CHECK(ok.code == 0);
  const std::string eer = slurp(dir / "a" / "eer_by_block.tsv");
  CHECK(std::count(eer.begin(), eer.end(), '\n') == 17);
  const std::string svg = slurp(dir / "a" / "eer_by_block.svg");
  std::size_t circles = 0;
  for (std::size_t p = svg.find("<circle"); p != std::string::npos; p = svg.find("<circle", p + 1)) ++circles;
  CHECK(circles == 16u);
  CHECK(fs::exists(dir / "a" / "hist_block16.svg"));
  cli({"plot", (dir / "report.json").string(), "--out", (dir / "b").string()});
  for (const auto& f : fs::directory_iterator(dir / "a"))
    CHECK(slurp(f.path()) == slurp(dir / "b" / f.path().filename()));

  CalibrationReport none;
  CHECK_THROWS_AS(plot_calibration(none, dir / "c"), NoData);
}

TEST_CASE("pipeline through the command line", "[cli][slow]") {
  const auto dir = scratch("pipeline");
  const auto data = (dir / "data").string();
  REQUIRE(cli({"make-synthetic", "--out", data, "--identities", "3", "--per-identity", "3", "--size", "96"}).code == 0);
  REQUIRE(cli({"align", "--in", data, "--out", (dir / "aligned").string(), "--resolution", "64"}).code == 0);
  CHECK(fs::exists(dir / "aligned" / "id2" / "2.png"));

  const auto cal = cli({"calibrate-ifsr", "--swap-model", "identity", "--data", data, "--n", "10", "--out",
                        (dir / "m.tsv").string()});
  REQUIRE(cal.code == 0);
  const auto m = read_margins(dir / "m.tsv");
  for (const auto& [b, v] : m.margins) CHECK(std::abs(v) <= 1e-7);
  CHECK(read_calibration_report(dir / "m.json").blocks.size() == m.margins.size());

  const auto run = (dir / "run").string();
  REQUIRE(cli({"train", "--config", "configB", "--data", data, "--margins", (dir / "m.tsv").string(), "--steps",
               "2", "--out", run, "--set", "base_channels=8", "--set", "channel_cap=16", "--set",
               "batch_size=2", "--set", "mask_every=1"})
              .code == 0);
  CHECK(read_log(dir / "run" / "metrics.jsonl").size() == 2u);

  const auto t = data + "/id0/0.png", s = data + "/id1/0.png", ck = run + "/checkpoint.fdck";
  REQUIRE(cli({"swap", "--target", t, "--source", s, "--checkpoint", ck, "--out", (dir / "x.png").string()}).code == 0);
  REQUIRE(cli({"swap", "--target", t, "--source", s, "--checkpoint", ck, "--out", (dir / "y.png").string()}).code == 0);
  CHECK(slurp(dir / "x.png") == slurp(dir / "y.png"));

  const auto ev = cli({"evaluate", "--swapped", (dir / "aligned").string(), "--reference",
                       (dir / "aligned").string(), "--gallery", (dir / "aligned").string(), "--out",
                       (dir / "report.json").string()});
  REQUIRE(ev.code == 0);
  CHECK(read_metric_report(dir / "report.json").fid.value() < 1e-6);

  REQUIRE(cli({"plot", run + "/metrics.jsonl", "--out", (dir / "figs").string()}).code == 0);
  CHECK(fs::exists(dir / "figs" / "loss_curves.svg"));
  CHECK(fs::exists(dir / "figs" / "mask_grid.png"));
}
