#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "fddm/errors.hpp"
#include "fddm/nn/layers.hpp"

namespace fddm::nn {

// Adam with float state and double update arithmetic. Parameters whose
// gradient was never touched in a step keep both their value and their
// moment state bit-for-bit unchanged.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw ParameterError("learning rate must be positive");
  }

  struct State {
    std::vector<float> m, v;
    std::int64_t steps = 0;
  };

  // Applies one update to every parameter that accumulated a gradient in ctx.
  void step(GraphContext& ctx, const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
      const std::vector<double>* g = ctx.grad_of(*p);
      if (g == nullptr) continue;
      State& st = state_[p];
      if (st.m.empty()) {
        st.m.assign(p->numel(), 0.0f);
        st.v.assign(p->numel(), 0.0f);
      }
      st.steps += 1;
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(st.steps));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(st.steps));
      for (std::size_t i = 0; i < p->numel(); ++i) {
        const double gi = (*g)[i];
        const double m = beta1_ * static_cast<double>(st.m[i]) + (1.0 - beta1_) * gi;
        const double v = beta2_ * static_cast<double>(st.v[i]) + (1.0 - beta2_) * gi * gi;
        st.m[i] = static_cast<float>(m);
        st.v[i] = static_cast<float>(v);
        const double update = lr_ * (m / c1) / (std::sqrt(v / c2) + eps_);
        p->value[i] = static_cast<float>(static_cast<double>(p->value[i]) - update);
      }
    }
  }

  [[nodiscard]] double learning_rate() const { return lr_; }
  [[nodiscard]] const State* state_of(Parameter* p) const {
    auto it = state_.find(p);
    return it == state_.end() ? nullptr : &it->second;
  }

  // Reinstalls persisted moment state (checkpoint resume).
  void restore(Parameter* p, State st) {
    if (st.m.size() != p->numel() || st.v.size() != p->numel())
      throw ContractError("optimizer state size mismatch for " + p->name);
    state_[p] = std::move(st);
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::unordered_map<Parameter*, State> state_;
};

}  // namespace fddm::nn
