// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Image terms are mean absolute differences; batch
// terms average over pairs, with non-same pairs contributing zero to the
// reconstruction and perceptual terms.
#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "facedancer/identity_backbone.hpp"
#include "facedancer/margins.hpp"
#include "facedancer/perceptual.hpp"

namespace facedancer {

struct LossWeights {
  double lambda_i = 10.0;
  double lambda_r = 5.0;
  double lambda_p = 0.2;
  double lambda_c = 1.0;
  double lambda_ifsr = 1.0;
  double lambda_gp = 10.0;
  double lambda_adv = 1.0;

  void validate() const {
    for (double w : {lambda_i, lambda_r, lambda_p, lambda_c, lambda_ifsr, lambda_gp, lambda_adv})
      if (!(w >= 0.0)) throw UsageError("loss weights must be non-negative");
  }

  // Weight applied to each generator term by name.
  std::map<std::string, double> generator_weights() const {
    return {{"adv", lambda_adv}, {"id", lambda_i}, {"rec", lambda_r},
            {"perc", lambda_p},  {"cycle", lambda_c}, {"ifsr", lambda_ifsr}};
  }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossReport {
  std::map<std::string, double> terms;
  std::map<std::string, double> weights;
  double total = 0.0;

  double recompute_total() const {
    double t = 0;
    for (const auto& [k, v] : terms) {
      auto it = weights.find(k);
      if (it != weights.end()) t += it->second * v;
    }
    return t;
  }

  nlohmann::json to_json() const {
    return {{"terms", terms}, {"weights", weights}, {"total", total}};
  }
};

enum class GpMode { Interpolated, RealOnly };

// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
Var<T> mask_vector(const std::vector<bool>& same) {
  Tensor<T> m(Shape{static_cast<std::int64_t>(same.size())});
  for (std::size_t i = 0; i < same.size(); ++i) m[static_cast<std::int64_t>(i)] = same[i] ? T(1) : T(0);
  return Var<T>::constant(std::move(m));
}

// Per-sample mean |a - b|: (N, ...) -> (N).
template <typename T>
Var<T> per_sample_l1(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeMismatch("loss operands differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const std::int64_t per = a.size() / a.shape()[0];
  return scale(reduce_samples(abs(sub(a, b))), T(1) / static_cast<T>(per));
}

template <typename T>
Var<T> zero_scalar() {
  return Var<T>::constant(Tensor<T>::scalar(T(0)));
}
}  // namespace detail

// Mean over the batch of 1 - cos(z_s, z_c).
template <typename T>
Var<T> identity_loss(const Var<T>& z_s, const Var<T>& z_c) {
  return mean(cosine_distance_rows(z_s, z_c));
}

template <typename T>
Var<T> reconstruction_loss(const Var<T>& x_t, const Var<T>& x_c, const std::vector<bool>& same) {
  if (static_cast<std::int64_t>(same.size()) != x_t.shape()[0])
    throw ShapeMismatch("same-pair mask does not match the batch");
  const Var<T> per = detail::per_sample_l1(x_t, x_c);
  return scale(sum(mul(per, detail::mask_vector<T>(same))), T(1) / static_cast<T>(same.size()));
}

template <typename T>
Var<T> perceptual_loss(const Var<T>& x_t, const Var<T>& x_c, const std::vector<bool>& same,
                       const PerceptualAdapter<T>& adapter) {
  if (static_cast<std::int64_t>(same.size()) != x_t.shape()[0])
    throw ShapeMismatch("same-pair mask does not match the batch");
  if (x_t.shape() != x_c.shape()) throw ShapeMismatch("perceptual loss operands differ in shape");
  if (std::none_of(same.begin(), same.end(), [](bool b) { return b; })) return detail::zero_scalar<T>();
  if (adapter.tap_count() < 5) throw ShapeMismatch("perceptual adapter needs at least five taps");
  std::vector<Var<T>> ft;
  {
    NoGrad ng;
    ft = adapter.taps(detach(x_t));
  }
  const auto fc = adapter.taps(x_c);
  const Var<T> mask = detail::mask_vector<T>(same);
  Var<T> total = detail::zero_scalar<T>();
  for (int i = 0; i < 5; ++i) {
    const Var<T> per = detail::per_sample_l1(ft[static_cast<std::size_t>(i)], fc[static_cast<std::size_t>(i)]);
    total = add(total, sum(mul(per, mask)));
  }
  return scale(total, T(1) / static_cast<T>(same.size()));
}

// mean |x_t - G(x_c, z_t)|, where z_t is the target's own identity.
template <typename T>
Var<T> cycle_loss(const Var<T>& x_t, const Var<T>& x_c, const Var<T>& z_t,
                  const std::function<Var<T>(const Var<T>&, const Var<T>&)>& generate) {
  return mean(abs(sub(x_t, generate(x_c, z_t))));
}

// Sum over blocks of mean-over-batch hinge(d_i - m_i * s); with `literal`,
// min(d_i - m_i * s, 0) instead.
template <typename T>
Var<T> ifsr_loss_from_features(const std::vector<Var<T>>& feats_t, const std::vector<Var<T>>& feats_c,
                               int first_block, const IFSRMargins& margins, double s,
                               bool literal = false) {
  if (feats_t.size() != feats_c.size()) throw ShapeMismatch("feature pyramids differ in length");
  if (!(s > 0)) throw UsageError("IFSR margin scale must be positive");
  margins.require(first_block, first_block + static_cast<int>(feats_t.size()) - 1);
  Var<T> total = detail::zero_scalar<T>();
  for (std::size_t i = 0; i < feats_t.size(); ++i) {
    const double m = margins.at(first_block + static_cast<int>(i));
    const Var<T> u = add_scalar(cosine_distance_rows(feats_t[i], feats_c[i]), static_cast<T>(-m * s));
    const Var<T> h = literal ? scale(relu(scale(u, T(-1))), T(-1)) : relu(u);
    total = add(total, mean(h));
  }
  return total;
}

template <typename T>
Var<T> ifsr_loss(const Var<T>& x_t, const Var<T>& x_c, const BackboneAdapter<T>& backbone,
                 const IFSRMargins& margins, double s, bool literal = false) {
  if (margins.empty()) throw MissingMargin("IFSR margins are empty");
  const int first = margins.first(), last = margins.last();
  std::vector<Var<T>> ft;
  {
    NoGrad ng;
    ft = backbone.features_batch(detach(x_t), first, last);
  }
  return ifsr_loss_from_features(ft, backbone.features_batch(x_c, first, last), first, margins, s,
                                 literal);
}

template <typename T>
Var<T> hinge_d_loss(const Var<T>& real, const Var<T>& fake) {
  const Var<T> r = mean(relu(add_scalar(scale(real, T(-1)), T(1))));
  const Var<T> f = mean(relu(add_scalar(fake, T(1))));
  return add(r, f);
}

template <typename T>
Var<T> hinge_g_loss(const Var<T>& fake) {
  return scale(mean(fake), T(-1));
}

// Interpolated mode: mean over the batch of (||grad critic(x_hat)|| - 1)^2 at
// x_hat = u * real + (1 - u) * fake with u ~ U(0, 1) per sample.
// Real-only mode: mean ||grad critic(real)||^2.
// The result stays differentiable with respect to the critic's parameters.
template <typename T>
Var<T> gradient_penalty(const std::function<Var<T>(const Var<T>&)>& critic, const Tensor<T>& real,
                        const Tensor<T>& fake, Rng& rng, GpMode mode = GpMode::Interpolated) {
  if (real.shape() != fake.shape()) throw ShapeMismatch("gradient penalty batches differ in shape");
  Tensor<T> x = real;
  if (mode == GpMode::Interpolated) {
    const std::int64_t n = real.dim(0), per = real.size() / n;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (std::int64_t i = 0; i < n; ++i) {
      const T u = static_cast<T>(u01(rng));
      for (std::int64_t k = i * per; k < (i + 1) * per; ++k) x[k] = u * real[k] + (T(1) - u) * fake[k];
    }
  }
  const Var<T> xh = Var<T>::leaf(std::move(x));
  const Var<T> g = grad(sum(critic(xh)), std::vector<Var<T>>{xh}, /*create_graph=*/true)[0];
  const Var<T> sq = reduce_samples(square(g));
  if (mode == GpMode::RealOnly) return mean(sq);
  return mean(square(add_scalar(sqrt(add_scalar(sq, T(1e-16))), T(-1))));
}

// Weighted sum of the generator terms present in `terms`.
template <typename T>
std::pair<Var<T>, LossReport> total_generator_loss(const std::map<std::string, Var<T>>& terms,
                                                   const LossWeights& w) {
  const auto weights = w.generator_weights();
  LossReport rep;
  Var<T> total = detail::zero_scalar<T>();
  for (const auto& [name, v] : terms) {
    const auto it = weights.find(name);
    if (it == weights.end()) throw UsageError("unknown loss term " + name);
    const double val = static_cast<double>(v.item());
    if (!std::isfinite(val)) throw NonFiniteLoss("loss term " + name + " is not finite");
    rep.terms[name] = val;
    rep.weights[name] = it->second;
    if (it->second != 0.0) total = add(total, scale(v, static_cast<T>(it->second)));
  }
  rep.total = rep.recompute_total();
  return {total, rep};
}

}  // namespace facedancer
