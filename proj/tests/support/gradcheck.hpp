#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fddm/nn/autodiff.hpp"
#include "fddm/rng.hpp"

namespace fddm::test {

// Builds a scalar loss from leaf tensors. Called repeatedly with perturbed
// copies, so it must be a pure function of the inputs.
using GraphFn = std::function<nn::Var(std::vector<nn::Var>&)>;

struct GradCheckResult {
  int checked = 0;
  int failed = 0;
  double worst_rel = 0.0;

  [[nodiscard]] bool ok() const { return failed == 0; }
};

inline double rel_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / scale;
}

// Central-difference check of every element of every input against the
// analytic gradient, with a float-rounded step and a fixed relative tolerance.
inline GradCheckResult check_gradients(const std::vector<nn::Tensor>& inputs, const GraphFn& build,
                                       double tol = 1e-3, double step = 1e-3) {
  // Analytic pass.
  std::vector<nn::Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(nn::make_var(t.clone(), true));
  nn::Var loss = build(vars);
  nn::backward(loss);

  auto eval = [&](const std::vector<nn::Tensor>& ts) {
    std::vector<nn::Var> vs;
    vs.reserve(ts.size());
    for (const auto& t : ts) vs.push_back(nn::make_var(t.clone(), false));
    return build(vs).value()[0];
  };

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      std::vector<nn::Tensor> plus, minus;
      for (const auto& t : inputs) {
        plus.push_back(t.clone());
        minus.push_back(t.clone());
      }
      plus[k][i] += step;
      minus[k][i] -= step;
      const double numeric = (eval(plus) - eval(minus)) / (2.0 * step);
      const double analytic = vars[k].grad_touched() ? vars[k].grad()[i] : 0.0;
      const double rel = rel_error(analytic, numeric);
      res.checked += 1;
      res.worst_rel = std::max(res.worst_rel, rel);
      if (rel > tol) res.failed += 1;
    }
  }
  return res;
}

inline nn::Tensor random_tensor(nn::Shape s, SeededRng& rng, double scale = 1.0) {
  nn::Tensor t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

}  // namespace fddm::test
