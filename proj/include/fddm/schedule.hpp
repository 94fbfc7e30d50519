#pragma once

#include <vector>

#include "fddm/errors.hpp"

namespace fddm {

enum class ScheduleKind { Linear };

// Variance schedule tables for t = 1..T. Accessors are 1-indexed to match
// the usual diffusion-step convention; index 0 is unused.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;       // beta[t]
  std::vector<double> alpha;      // 1 - beta[t]
  std::vector<double> alpha_bar;  // prod_{i<=t} alpha[i]
  std::vector<double> sigma2;     // reverse-step variance, = beta[t]

  [[nodiscard]] bool valid_step(int t) const { return t >= 1 && t <= steps; }
};

// Linear beta ramp from beta_start to beta_end inclusive, cumulative
// products in double precision. Default diffusion settings used across
// the pipeline are T=1000, 1e-4 -> 0.02.
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end,
                            ScheduleKind kind = ScheduleKind::Linear);

inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;
inline constexpr int kDefaultSteps = 1000;

}  // namespace fddm
