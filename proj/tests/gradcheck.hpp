// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle for checking analytic gradients.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "facedancer/autodiff.hpp"

namespace facedancer::testing {

struct GradCheckResult {
  bool ok = true;
  double worst_abs = 0.0;
  double worst_rel = 0.0;
  std::string where;
};

// Compares grad(f(inputs)) with central differences at step eps.
// Entries pass when |analytic - numeric| <= rtol * max(|analytic|, |numeric|) + atol.
inline GradCheckResult gradcheck(
    const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double eps = 1e-4, double rtol = 1e-3,
    double atol = 1e-7) {
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(Var<double>::leaf(t));
  const Var<double> out = f(leaves);
  const std::vector<Var<double>> analytic = grad(out, leaves);

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::int64_t i = 0; i < inputs[k].size(); ++i) {
      auto probe = [&](double delta) {
        std::vector<Var<double>> vs;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor<double> t = inputs[j];
          if (j == k) t[i] += delta;
          vs.push_back(Var<double>::constant(std::move(t)));
        }
        return f(vs).item();
      };
      const double numeric = (probe(eps) - probe(-eps)) / (2 * eps);
      const double a = analytic[k].value()[i];
      const double diff = std::abs(a - numeric);
      const double scale = std::max(std::abs(a), std::abs(numeric));
      if (diff > res.worst_abs) res.worst_abs = diff;
      if (scale > 0 && diff / scale > res.worst_rel) res.worst_rel = diff / scale;
      if (diff > rtol * scale + atol) {
        res.ok = false;
        res.where = "input " + std::to_string(k) + " element " + std::to_string(i) +
                    ": analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace facedancer::testing
