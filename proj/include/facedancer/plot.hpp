// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "facedancer/error.hpp"
#include "facedancer/ifsr_calibration.hpp"
#include "facedancer/trainer.hpp"

namespace facedancer {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  return colors[i % 8];
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw UsageError("cannot write " + p.string());
  f << text;
}

}  // namespace detail

// Line (or bar) chart as a standalone SVG document.
inline std::string render_svg_chart(const std::string& title, const std::string& xlabel,
                                    const std::vector<Series>& series, bool bars = false,
                                    bool markers = false) {
  constexpr double W = 720, H = 420, L = 70, R = 160, T = 40, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!(x0 <= x1)) throw NoData("nothing to plot for " + title);
  if (bars) y0 = std::min(y0, 0.0);
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n"
    << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel
    << "</text>\n"
    << "<g stroke=\"black\"><line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\""
    << H - B << "\"/><line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
    << "\"/></g>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    o << "<text x=\"" << detail::num(px(xv)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">"
      << detail::num(std::round(xv * 1000) / 1000) << "</text>\n"
      << "<text x=\"" << L - 6 << "\" y=\"" << detail::num(py(yv) + 4) << "\" text-anchor=\"end\">"
      << detail::num(std::round(yv * 1000) / 1000) << "</text>\n";
  }
  const double bw = series.empty() || series[0].x.size() < 2
                        ? 8
                        : (W - L - R) / static_cast<double>(series[0].x.size()) / series.size();
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* c = detail::palette(si);
    if (bars) {
      for (std::size_t i = 0; i < s.x.size(); ++i)
        o << "<rect x=\"" << detail::num(px(s.x[i]) + bw * si) << "\" y=\"" << detail::num(py(s.y[i]))
          << "\" width=\"" << detail::num(bw) << "\" height=\"" << detail::num(py(0) - py(s.y[i]))
          << "\" fill=\"" << c << "\" fill-opacity=\"0.7\"/>\n";
    } else {
      o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i)
        if (std::isfinite(s.y[i])) o << detail::num(px(s.x[i])) << ',' << detail::num(py(s.y[i])) << ' ';
      o << "\"/>\n";
      if (markers)
        for (std::size_t i = 0; i < s.x.size(); ++i)
          o << "<circle cx=\"" << detail::num(px(s.x[i])) << "\" cy=\"" << detail::num(py(s.y[i]))
            << "\" r=\"3\" fill=\"" << c << "\"/>\n";
    }
    o << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (si + 1) << "\" fill=\"" << c << "\">" << s.name
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// Tab-separated columns: x followed by one column per series (shared x).
inline std::string series_tsv(const std::string& xname, const std::vector<Series>& series) {
  std::ostringstream o;
  o << xname;
  for (const auto& s : series) o << '\t' << s.name;
  o << '\n';
  if (series.empty()) return o.str();
  for (std::size_t i = 0; i < series[0].x.size(); ++i) {
    o << detail::num(series[0].x[i]);
    for (const auto& s : series) o << '\t' << detail::num(s.y[i]);
    o << '\n';
  }
  return o.str();
}

// ---------------------------------------------------------------------------

// Loss curves from a training log, plus a grid of exported AFFA masks when
// `mask_dir` holds any.
inline std::vector<std::filesystem::path> plot_training_log(const std::vector<StepReport>& log,
                                                            const std::filesystem::path& out_dir,
                                                            const std::filesystem::path& mask_dir = {}) {
  if (log.empty()) throw NoData("training log is empty");
  std::vector<Series> g;
  std::map<std::string, Series> terms;
  Series total{"g_total", {}, {}}, d{"d_total", {}, {}};
  for (const auto& r : log) {
    total.x.push_back(static_cast<double>(r.step));
    total.y.push_back(r.g.total);
    d.x.push_back(static_cast<double>(r.step));
    d.y.push_back(r.d_total);
    for (const auto& [k, v] : r.g.terms) {
      auto& s = terms[k];
      s.name = k;
      s.x.push_back(static_cast<double>(r.step));
      s.y.push_back(v);
    }
  }
  g.push_back(total);
  g.push_back(d);
  for (auto& [k, s] : terms)
    if (s.x.size() == log.size()) g.push_back(s);

  std::vector<std::filesystem::path> out;
  const auto svg = out_dir / "loss_curves.svg", tsv = out_dir / "loss_curves.tsv";
  detail::write_file(svg, render_svg_chart("training losses", "step", g));
  detail::write_file(tsv, series_tsv("step", g));
  out = {svg, tsv};

  if (!mask_dir.empty() && std::filesystem::is_directory(mask_dir)) {
    const std::regex name(R"(step(\d+)_(\d+)\.png)");
    std::map<std::int64_t, std::map<int, std::filesystem::path>> grid;
    std::vector<int> cols;
    for (const auto& e : std::filesystem::directory_iterator(mask_dir)) {
      std::smatch m;
      const std::string f = e.path().filename().string();
      if (!std::regex_match(f, m, name)) continue;
      const int res = std::stoi(m[2]);
      grid[std::stoll(m[1])][res] = e.path();
      if (std::find(cols.begin(), cols.end(), res) == cols.end()) cols.push_back(res);
    }
    if (!grid.empty()) {
      std::sort(cols.begin(), cols.end());
      constexpr int tile = 64, pad = 2;
      cv::Mat canvas(static_cast<int>(grid.size()) * (tile + pad) + pad,
                     static_cast<int>(cols.size()) * (tile + pad) + pad, CV_8UC1, cv::Scalar(255));
      std::ostringstream idx;
      idx << "row\tstep\tcol\tresolution\tmean\n";
      int row = 0;
      for (const auto& [step, by_res] : grid) {
        for (std::size_t ci = 0; ci < cols.size(); ++ci) {
          const auto it = by_res.find(cols[ci]);
          if (it == by_res.end()) continue;
          const cv::Mat m = cv::imread(it->second.string(), cv::IMREAD_GRAYSCALE);
          if (m.empty()) throw ImageIOError("cannot decode mask " + it->second.string());
          cv::Mat r;
          cv::resize(m, r, cv::Size(tile, tile), 0, 0, cv::INTER_NEAREST);
          r.copyTo(canvas(cv::Rect(pad + static_cast<int>(ci) * (tile + pad), pad + row * (tile + pad), tile, tile)));
          idx << row << '\t' << step << '\t' << ci << '\t' << cols[ci] << '\t'
              << detail::num(cv::mean(m)[0] / 255.0) << '\n';
        }
        ++row;
      }
      const auto png = out_dir / "mask_grid.png", itsv = out_dir / "mask_grid.tsv";
      if (!cv::imwrite(png.string(), canvas)) throw ImageIOError("cannot write " + png.string());
      detail::write_file(itsv, idx.str());
      out.push_back(png);
      out.push_back(itsv);
    }
  }
  return out;
}

// EER-vs-block line and per-block distance histograms.
inline std::vector<std::filesystem::path> plot_calibration(const CalibrationReport& r,
                                                           const std::filesystem::path& out_dir) {
  if (r.blocks.empty()) throw NoData("calibration report has no blocks");
  Series eer{"eer", {}, {}};
  for (const auto& b : r.blocks) {
    eer.x.push_back(b.block_index);
    eer.y.push_back(b.eer);
  }
  std::vector<std::filesystem::path> out;
  const auto esvg = out_dir / "eer_by_block.svg", etsv = out_dir / "eer_by_block.tsv";
  detail::write_file(esvg, render_svg_chart("EER between c2t and c2s distances", "block", {eer}, false, true));
  detail::write_file(etsv, series_tsv("block", {eer}));
  out = {esvg, etsv};

  const double width = 2.0 / kHistogramBins;
  for (const auto& b : r.blocks) {
    std::vector<Series> h{{"c2t", {}, {}}, {"c2s", {}, {}}, {"neg", {}, {}}};
    const std::vector<std::int64_t>* src[] = {&b.hist_c2t, &b.hist_c2s, &b.hist_neg};
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t i = 0; i < src[s]->size(); ++i) {
        h[s].x.push_back(static_cast<double>(i) * width);
        h[s].y.push_back(static_cast<double>((*src[s])[i]));
      }
    const std::string stem = "hist_block" + std::to_string(b.block_index);
    detail::write_file(out_dir / (stem + ".svg"),
                       render_svg_chart("cosine distances, block " + std::to_string(b.block_index),
                                        "distance", h, true));
    detail::write_file(out_dir / (stem + ".tsv"), series_tsv("bin_lo", h));
    out.push_back(out_dir / (stem + ".svg"));
    out.push_back(out_dir / (stem + ".tsv"));
  }
  return out;
}

}  // namespace facedancer
