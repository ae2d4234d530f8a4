// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "facedancer/ops.hpp"

namespace facedancer {

using Rng = std::mt19937_64;

template <typename T>
Tensor<T> random_normal(const Shape& shape, Rng& rng, double stddev) {
  Tensor<T> t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.span()) v = static_cast<T>(dist(rng));
  return t;
}

// Named, ordered collection of trainable leaves belonging to one network.
template <typename T>
class ParamStore {
 public:
  Var<T> create(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw UsageError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back({name, Var<T>::leaf(std::move(init))});
    return params_.back().second;
  }

  const std::vector<std::pair<std::string, Var<T>>>& named() const { return params_; }
  std::vector<Var<T>> vars() const {
    std::vector<Var<T>> v;
    v.reserve(params_.size());
    for (const auto& p : params_) v.push_back(p.second);
    return v;
  }
  std::size_t size() const { return params_.size(); }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.second.size();
    return n;
  }
  Var<T> at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexOutOfRange("no parameter named " + name);
    return params_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  // Freezes (or unfreezes) every parameter.
  void set_trainable(bool on) {
    for (auto& p : params_) p.second.set_requires_grad(on);
  }

  // FNV-1a over raw parameter bytes; used to prove frozen networks stay put.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.second.value().data());
      const std::size_t len = static_cast<std::size_t>(p.second.size()) * sizeof(T);
      for (std::size_t i = 0; i < len; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    }
    return h;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

// Prefix-scoped view used while building a network.
template <typename T>
struct Scope {
  ParamStore<T>* store;
  Rng* rng;
  std::string prefix;

  Scope operator/(const std::string& child) const {
    return {store, rng, prefix.empty() ? child : prefix + "." + child};
  }
  Var<T> param(const std::string& name, Tensor<T> init) const {
    return store->create(prefix.empty() ? name : prefix + "." + name, std::move(init));
  }
};

// Fan-in scaled normal initialization (He gain for leaky activations).
inline double he_stddev(std::int64_t fan_in) {
  return std::sqrt(2.0 / static_cast<double>(fan_in));
}

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;  // undefined when the layer has no bias
  ConvGeom geom;

  Conv2d() = default;
  Conv2d(const Scope<T>& s, std::int64_t in, std::int64_t out, std::int64_t k, bool with_bias = true,
         ConvGeom g = {1, -1}, double init_gain = 1.0)
      : geom(g) {
    if (geom.pad < 0) geom.pad = static_cast<int>(k / 2);
    weight = s.param("weight", random_normal<T>(Shape{out, in, k, k}, *s.rng,
                                                init_gain * he_stddev(in * k * k)));
    if (with_bias) bias = s.param("bias", Tensor<T>(Shape{out}));
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> y = conv2d(x, weight, geom);
    if (bias.defined()) y = add(y, broadcast_channels(bias, y.shape()));
    return y;
  }
};

template <typename T>
struct Linear {
  Var<T> weight;  // (out, in)
  Var<T> bias;    // (out)

  Linear() = default;
  Linear(const Scope<T>& s, std::int64_t in, std::int64_t out, bool with_bias = true,
         double init_gain = 1.0, T bias_init = T(0)) {
    weight = s.param("weight",
                     random_normal<T>(Shape{out, in}, *s.rng, init_gain * he_stddev(in)));
    if (with_bias) bias = s.param("bias", Tensor<T>(Shape{out}, bias_init));
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> y = matmul(x, weight, false, true);
    if (bias.defined()) y = add(y, broadcast_channels(bias, y.shape()));
    return y;
  }
};

// Learnable per-channel affine following instance normalization.
template <typename T>
struct InstanceNorm {
  Var<T> gamma, beta;

  InstanceNorm() = default;
  InstanceNorm(const Scope<T>& s, std::int64_t channels)
      : gamma(s.param("gamma", Tensor<T>(Shape{channels}, T(1)))),
        beta(s.param("beta", Tensor<T>(Shape{channels}))) {}

  Var<T> operator()(const Var<T>& x) const {
    const Var<T> n = instance_norm(x);
    return add(mul(n, broadcast_channels(gamma, x.shape())), broadcast_channels(beta, x.shape()));
  }
};

}  // namespace facedancer
