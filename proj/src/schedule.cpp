#include "fddm/schedule.hpp"

#include <string>

namespace fddm {

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind) {
  if (steps < 1) throw ParameterError("schedule needs at least one step");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw ParameterError("betas must satisfy 0 < beta_start <= beta_end < 1, got [" + std::to_string(beta_start) +
                         ", " + std::to_string(beta_end) + "]");
  (void)kind;  // single kind for now

  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(steps + 1, 0.0);
  s.alpha.resize(steps + 1, 0.0);
  s.alpha_bar.resize(steps + 1, 0.0);
  s.sigma2.resize(steps + 1, 0.0);

  double running = 1.0;
  for (int t = 1; t <= steps; ++t) {
    double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
    s.sigma2[t] = s.beta[t];
  }
  return s;
}

}  // namespace fddm
