// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and its flat key-value file format:
//
//   # comment
//   inherit = configB          (a preset name or another config file)
//   resolution = 64
//   lambda_i = 10
//
// Later assignments win; `inherit` is applied first wherever it appears.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "facedancer/generator.hpp"
#include "facedancer/objectives.hpp"

namespace facedancer {

enum class DecayMode { Staircase, Continuous };

struct OptimizerSpec {
  double lr0 = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
  double decay = 0.97;
  std::int64_t decay_every = 100000;
  DecayMode decay_mode = DecayMode::Staircase;

  void validate() const {
    if (!(lr0 > 0) || !(decay > 0) || decay_every < 1) throw UsageError("invalid learning-rate schedule");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0))
      throw UsageError("invalid Adam coefficients");
  }
  friend bool operator==(const OptimizerSpec&, const OptimizerSpec&) = default;
};

struct TrainOptions {
  std::string preset = "configB";
  int resolution = 64;
  // Optional model overrides on top of the preset.
  std::optional<bool> use_mapping, use_ifsr;
  std::optional<int> base_channels, channel_cap, bottleneck_resolution;
  std::map<int, Fusion> fusion_overrides;

  LossWeights weights;
  OptimizerSpec optimizer;
  std::int64_t batch_size = 4;
  double same_prob = 0.2;
  double ifsr_scale = 1.2;
  bool ifsr_literal = false;
  GpMode gp_mode = GpMode::Interpolated;
  bool augment = true;

  std::uint64_t seed = 20220101;
  bool deterministic = true;
  std::string backbone = "stub";
  std::string perceptual = "stub";
  std::string margins;  // path; required when the model uses IFSR

  std::int64_t checkpoint_every = 500;
  std::int64_t mask_every = 500;

  ModelConfig model() const {
    ModelConfig c = facedancer::preset(preset, resolution);
    if (use_mapping) c.use_mapping = *use_mapping;
    if (use_ifsr) c.use_ifsr = *use_ifsr;
    if (base_channels) c.base_channels = *base_channels;
    if (channel_cap) c.channel_cap = *channel_cap;
    if (bottleneck_resolution) {
      // Re-key the plan by level for the new bottleneck.
      const auto levels = c.decoder_resolutions();
      std::vector<Fusion> by_level;
      for (auto it = levels.rbegin(); it != levels.rend(); ++it) by_level.push_back(c.fusion_plan.at(*it));
      c.bottleneck_resolution = *bottleneck_resolution;
      c.fusion_plan.clear();
      const auto now = c.decoder_resolutions();
      for (std::size_t l = 0; l < now.size(); ++l)
        c.fusion_plan[now[now.size() - 1 - l]] = l < by_level.size() ? by_level[l] : Fusion::NONE;
    }
    for (const auto& [r, f] : fusion_overrides) {
      if (!c.fusion_plan.count(r)) throw ConfigMismatch("no decoder level at resolution " + std::to_string(r));
      c.fusion_plan[r] = f;
    }
    c.validate();
    return c;
  }

  void validate() const {
    model();
    weights.validate();
    optimizer.validate();
    if (batch_size < 1) throw UsageError("batch_size must be at least 1");
    if (!(same_prob >= 0 && same_prob <= 1)) throw UsageError("same_prob must lie in [0, 1]");
    if (!(ifsr_scale > 0)) throw UsageError("ifsr_scale must be positive");
  }

  friend bool operator==(const TrainOptions&, const TrainOptions&) = default;
};

namespace detail {

inline bool parse_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("key " + k + " expects a boolean, got '" + v + "'");
}

template <typename N>
N parse_number(const std::string& k, const std::string& v) {
  std::istringstream is(v);
  N n{};
  if (!(is >> n) || !(is >> std::ws).eof()) throw UsageError("key " + k + " expects a number, got '" + v + "'");
  return n;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "preset",        "resolution",   "use_mapping",   "use_ifsr",        "base_channels",
      "channel_cap",   "bottleneck_resolution",         "lambda_i",        "lambda_r",
      "lambda_p",      "lambda_c",     "lambda_ifsr",   "lambda_gp",       "lambda_adv",
      "lr",            "beta1",        "beta2",         "adam_eps",        "lr_decay",
      "lr_decay_every", "decay_mode",  "batch_size",    "same_prob",       "ifsr_scale",
      "ifsr_literal",  "gp_mode",      "augment",       "seed",            "deterministic",
      "backbone",      "perceptual",   "margins",       "checkpoint_every", "mask_every"};
  return keys;
}

// Applies one assignment. `fusion.<res>` keys override single decoder levels.
inline void set_option(TrainOptions& o, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  const std::string& k = key;
  const std::string& v = value;
  if (k.rfind("fusion.", 0) == 0) {
    o.fusion_overrides[parse_number<int>(k, k.substr(7))] = parse_fusion(v);
  } else if (k == "preset") {
    preset(v, 256);  // rejects unknown names
    o.preset = v;
  } else if (k == "resolution") o.resolution = parse_number<int>(k, v);
  else if (k == "use_mapping") o.use_mapping = parse_bool(k, v);
  else if (k == "use_ifsr") o.use_ifsr = parse_bool(k, v);
  else if (k == "base_channels") o.base_channels = parse_number<int>(k, v);
  else if (k == "channel_cap") o.channel_cap = parse_number<int>(k, v);
  else if (k == "bottleneck_resolution") o.bottleneck_resolution = parse_number<int>(k, v);
  else if (k == "lambda_i") o.weights.lambda_i = parse_number<double>(k, v);
  else if (k == "lambda_r") o.weights.lambda_r = parse_number<double>(k, v);
  else if (k == "lambda_p") o.weights.lambda_p = parse_number<double>(k, v);
  else if (k == "lambda_c") o.weights.lambda_c = parse_number<double>(k, v);
  else if (k == "lambda_ifsr") o.weights.lambda_ifsr = parse_number<double>(k, v);
  else if (k == "lambda_gp") o.weights.lambda_gp = parse_number<double>(k, v);
  else if (k == "lambda_adv") o.weights.lambda_adv = parse_number<double>(k, v);
  else if (k == "lr") o.optimizer.lr0 = parse_number<double>(k, v);
  else if (k == "beta1") o.optimizer.beta1 = parse_number<double>(k, v);
  else if (k == "beta2") o.optimizer.beta2 = parse_number<double>(k, v);
  else if (k == "adam_eps") o.optimizer.eps = parse_number<double>(k, v);
  else if (k == "lr_decay") o.optimizer.decay = parse_number<double>(k, v);
  else if (k == "lr_decay_every") o.optimizer.decay_every = parse_number<std::int64_t>(k, v);
  else if (k == "decay_mode") {
    if (v == "staircase") o.optimizer.decay_mode = DecayMode::Staircase;
    else if (v == "continuous") o.optimizer.decay_mode = DecayMode::Continuous;
    else throw UsageError("decay_mode must be staircase or continuous");
  } else if (k == "batch_size") o.batch_size = parse_number<std::int64_t>(k, v);
  else if (k == "same_prob") o.same_prob = parse_number<double>(k, v);
  else if (k == "ifsr_scale") o.ifsr_scale = parse_number<double>(k, v);
  else if (k == "ifsr_literal") o.ifsr_literal = parse_bool(k, v);
  else if (k == "gp_mode") {
    if (v == "interpolated") o.gp_mode = GpMode::Interpolated;
    else if (v == "real_only") o.gp_mode = GpMode::RealOnly;
    else throw UsageError("gp_mode must be interpolated or real_only");
  } else if (k == "augment") o.augment = parse_bool(k, v);
  else if (k == "seed") o.seed = parse_number<std::uint64_t>(k, v);
  else if (k == "deterministic") o.deterministic = parse_bool(k, v);
  else if (k == "backbone") o.backbone = v;
  else if (k == "perceptual") o.perceptual = v;
  else if (k == "margins") o.margins = v;
  else if (k == "checkpoint_every") o.checkpoint_every = parse_number<std::int64_t>(k, v);
  else if (k == "mask_every") o.mask_every = parse_number<std::int64_t>(k, v);
  else throw UnknownKey("unknown configuration key '" + k + "'");
}

// Every key with its effective value, in a stable order.
inline std::vector<std::pair<std::string, std::string>> to_key_values(const TrainOptions& o) {
  using detail::fmt;
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  const ModelConfig m = o.model();
  std::vector<std::pair<std::string, std::string>> kv = {
      {"preset", o.preset},
      {"resolution", std::to_string(o.resolution)},
      {"use_mapping", b(m.use_mapping)},
      {"use_ifsr", b(m.use_ifsr)},
      {"base_channels", std::to_string(m.base_channels)},
      {"channel_cap", std::to_string(m.channel_cap)},
      {"bottleneck_resolution", std::to_string(m.bottleneck_resolution)}};
  for (auto it = m.fusion_plan.rbegin(); it != m.fusion_plan.rend(); ++it)
    kv.emplace_back("fusion." + std::to_string(it->first), to_string(it->second));
  const auto& w = o.weights;
  const auto& p = o.optimizer;
  const std::vector<std::pair<std::string, std::string>> rest = {
      {"lambda_i", fmt(w.lambda_i)},
      {"lambda_r", fmt(w.lambda_r)},
      {"lambda_p", fmt(w.lambda_p)},
      {"lambda_c", fmt(w.lambda_c)},
      {"lambda_ifsr", fmt(w.lambda_ifsr)},
      {"lambda_gp", fmt(w.lambda_gp)},
      {"lambda_adv", fmt(w.lambda_adv)},
      {"lr", fmt(p.lr0)},
      {"beta1", fmt(p.beta1)},
      {"beta2", fmt(p.beta2)},
      {"adam_eps", fmt(p.eps)},
      {"lr_decay", fmt(p.decay)},
      {"lr_decay_every", std::to_string(p.decay_every)},
      {"decay_mode", p.decay_mode == DecayMode::Staircase ? "staircase" : "continuous"},
      {"batch_size", std::to_string(o.batch_size)},
      {"same_prob", fmt(o.same_prob)},
      {"ifsr_scale", fmt(o.ifsr_scale)},
      {"ifsr_literal", b(o.ifsr_literal)},
      {"gp_mode", o.gp_mode == GpMode::Interpolated ? "interpolated" : "real_only"},
      {"augment", b(o.augment)},
      {"seed", std::to_string(o.seed)},
      {"deterministic", b(o.deterministic)},
      {"backbone", o.backbone},
      {"perceptual", o.perceptual},
      {"margins", o.margins},
      {"checkpoint_every", std::to_string(o.checkpoint_every)},
      {"mask_every", std::to_string(o.mask_every)}};
  kv.insert(kv.end(), rest.begin(), rest.end());
  return kv;
}

inline std::string format_config(const TrainOptions& o) {
  std::ostringstream os;
  for (const auto& [k, v] : to_key_values(o)) os << k << " = " << v << '\n';
  return os.str();
}

// Canonical round trip: parsing the formatted text restores every value.
inline TrainOptions options_from_key_values(const std::vector<std::pair<std::string, std::string>>& kv) {
  TrainOptions o;
  for (const auto& [k, v] : kv) set_option(o, k, v);
  o.validate();
  return o;
}

namespace detail {

inline std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text,
                                                                      const std::string& origin) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(origin + ":" + std::to_string(n) + ": expected 'key = value'");
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

inline void load_into(TrainOptions& o, const std::filesystem::path& path, int depth) {
  if (depth > 16) throw ParseError("config inheritance is too deep at " + path.string());
  std::ifstream f(path);
  if (!f) throw FileNotFound("no such config file: " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const auto kv = parse_kv_text(ss.str(), path.string());
  for (const auto& [k, v] : kv) {
    if (k != "inherit") continue;
    const auto& names = preset_names();
    if (std::find(names.begin(), names.end(), v) != names.end()) {
      o.preset = v;
    } else {
      const std::filesystem::path parent = std::filesystem::path(v).is_absolute() ? std::filesystem::path(v) : path.parent_path() / v;
      load_into(o, parent, depth + 1);
    }
  }
  for (const auto& [k, v] : kv)
    if (k != "inherit") set_option(o, k, v);
}

}  // namespace detail

// A preset name or a config file, followed by "key=value" overrides.
inline TrainOptions load_train_options(const std::string& config,
                                       const std::vector<std::string>& overrides = {}) {
  TrainOptions o;
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), config) != names.end()) {
    o.preset = config;
  } else if (!config.empty()) {
    detail::load_into(o, config, 0);
  }
  for (const auto& s : overrides) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("override '" + s + "' is not key=value");
    set_option(o, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
  }
  o.validate();
  return o;
}

inline TrainOptions parse_train_options(const std::string& text) {
  TrainOptions o;
  for (const auto& [k, v] : detail::parse_kv_text(text, "<text>")) {
    if (k == "inherit") set_option(o, "preset", v);
    else set_option(o, k, v);
  }
  o.validate();
  return o;
}

}  // namespace facedancer
