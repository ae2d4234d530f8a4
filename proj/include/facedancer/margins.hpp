// SPDX-License-Identifier: Apache-2.0
//
// Per-block IFSR margins and their plain-text table format:
//
//   # swap_model_id=<id>
//   # backbone_id=<id>
//   # statistic=mean_c2t
//   # tap=post_add_post_activation
//   # sample_count=<n>
//   # <extra key>=<value>
//   block_index<TAB>margin<TAB>n_samples
//   2<TAB>0.123...<TAB>1000
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "facedancer/error.hpp"

namespace facedancer {

struct IFSRMargins {
  std::map<int, double> margins;          // block index -> m_i
  std::map<int, std::int64_t> n_samples;  // block index -> samples behind m_i
  std::int64_t sample_count = 0;
  std::string swap_model_id = "unknown";
  std::string backbone_id = "unknown";
  std::string statistic = "mean_c2t";
  std::string tap = "post_add_post_activation";
  std::map<std::string, std::string> extra;

  bool empty() const { return margins.empty(); }
  int first() const { return margins.empty() ? 0 : margins.begin()->first; }
  int last() const { return margins.empty() ? -1 : margins.rbegin()->first; }

  double at(int block) const {
    auto it = margins.find(block);
    if (it == margins.end()) throw MissingMargin("no margin for block " + std::to_string(block));
    return it->second;
  }

  void require(int first_block, int last_block) const {
    for (int b = first_block; b <= last_block; ++b) at(b);
  }

  void validate() const {
    int prev = 0;
    bool started = false;
    for (const auto& [b, m] : margins) {
      if (!(m >= 0.0 && m <= 2.0))
        throw ParseError("margin for block " + std::to_string(b) + " outside [0, 2]");
      if (started && b != prev + 1) throw ParseError("margin blocks are not contiguous");
      prev = b;
      started = true;
    }
  }

  friend bool operator==(const IFSRMargins&, const IFSRMargins&) = default;
};

inline std::string format_margins(const IFSRMargins& m) {
  std::ostringstream os;
  os << "# swap_model_id=" << m.swap_model_id << '\n'
     << "# backbone_id=" << m.backbone_id << '\n'
     << "# statistic=" << m.statistic << '\n'
     << "# tap=" << m.tap << '\n'
     << "# sample_count=" << m.sample_count << '\n';
  for (const auto& [k, v] : m.extra) os << "# " << k << '=' << v << '\n';
  os << "block_index\tmargin\tn_samples\n";
  char buf[64];
  for (const auto& [b, v] : m.margins) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    const auto it = m.n_samples.find(b);
    os << b << '\t' << buf << '\t' << (it == m.n_samples.end() ? 0 : it->second) << '\n';
  }
  return os.str();
}

inline IFSRMargins parse_margins(const std::string& text) {
  IFSRMargins m;
  std::istringstream is(text);
  std::string line;
  bool saw_columns = false;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto body = line.substr(line.find_first_not_of("# "));
      const auto eq = body.find('=');
      if (eq == std::string::npos) continue;
      const std::string k = body.substr(0, eq), v = body.substr(eq + 1);
      if (k == "swap_model_id") m.swap_model_id = v;
      else if (k == "backbone_id") m.backbone_id = v;
      else if (k == "statistic") m.statistic = v;
      else if (k == "tap") m.tap = v;
      else if (k == "sample_count") m.sample_count = std::stoll(v);
      else m.extra[k] = v;
      continue;
    }
    if (!saw_columns) {
      if (line.rfind("block_index", 0) != 0) throw ParseError("margins table lacks its column line");
      saw_columns = true;
      continue;
    }
    std::istringstream row(line);
    int b;
    double v;
    std::int64_t n = 0;
    if (!(row >> b >> v)) throw ParseError("bad margins row: " + line);
    row >> n;
    m.margins[b] = v;
    m.n_samples[b] = n;
  }
  m.validate();
  return m;
}

inline void write_margins(const std::filesystem::path& path, const IFSRMargins& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw ImageIOError("cannot write " + tmp);
    f << format_margins(m);
  }
  std::filesystem::rename(tmp, path);
}

inline IFSRMargins read_margins(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FileNotFound("no such margins file: " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_margins(ss.str());
}

}  // namespace facedancer
