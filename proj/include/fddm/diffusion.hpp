#pragma once

#include <functional>
#include <vector>

#include "fddm/errors.hpp"
#include "fddm/grid.hpp"
#include "fddm/rng.hpp"
#include "fddm/schedule.hpp"

namespace fddm {

// Dense (channels, height, width) stack, row-major within each channel.
// The diffusion state lives on this type: in the wavelet domain it is the
// 3-channel high-frequency group (LH, HL, HH); the image-domain ablation
// uses a single full-resolution channel.
struct ChannelStack {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  ChannelStack() = default;
  ChannelStack(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {
    if (c <= 0 || h <= 0 || w <= 0) throw DimensionError("stack dimensions must be positive");
  }

  double& at(int c, int r, int col) { return values[(static_cast<std::size_t>(c) * height + r) * width + col]; }
  double at(int c, int r, int col) const { return values[(static_cast<std::size_t>(c) * height + r) * width + col]; }

  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] bool same_shape(const ChannelStack& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

// A 3-channel stack in subband order (LH, HL, HH).
using BandStack = ChannelStack;

// Fills a stack with i.i.d. standard-normal draws in (c, row, col) order.
ChannelStack gaussian_like(int channels, int height, int width, SeededRng& rng);

// Closed-form forward marginal: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
ChannelStack q_sample(const ChannelStack& x0, int t, const ChannelStack& eps, const NoiseSchedule& s);

// One forward transition: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * z.
ChannelStack q_step(const ChannelStack& x_prev, int t, const NoiseSchedule& s, SeededRng& rng);

// Predicted reverse-transition mean:
//   (1/sqrt(alpha_t)) * (x_t - ((1 - alpha_t)/sqrt(1 - abar_t)) * eps_pred).
ChannelStack reverse_mean(const ChannelStack& x_t, const ChannelStack& eps_pred, int t, const NoiseSchedule& s);

// Noise predictor viewed from the sampler: conditioning is baked into the
// closure; only the state and the step vary per call.
using DenoiserFn = std::function<ChannelStack(const ChannelStack& x_t, int t)>;

// One reverse step. Adds sqrt(sigma2_t) * z for t > 1; the final step
// (t = 1) is deterministic.
ChannelStack p_sample(const DenoiserFn& denoiser, const ChannelStack& x_t, int t, const NoiseSchedule& s,
                      SeededRng& rng);

// Full reverse chain from pure noise, visiting every stride-th step
// (T, T-stride, ..., stride). For stride > 1 each visited transition uses
// the variance actually accumulated between the two visited marginals
// (beta'_k = 1 - abar[t_k]/abar[t_{k-1}]), so the chain removes all the
// noise rather than 1/stride of it; the denoiser is still queried at the
// original step indices. stride = 1 is the plain schedule unchanged.
// Requires steps % stride == 0.
ChannelStack sample_loop(const DenoiserFn& denoiser, int channels, int height, int width, const NoiseSchedule& s,
                         SeededRng& rng, int stride = 1);

enum class NoiseLossKind { L1, L2 };

// Mean absolute error between true and predicted noise; the L2 variant is
// the mean squared error, selectable for ablation.
double noise_loss(const ChannelStack& eps_true, const ChannelStack& eps_pred,
                  NoiseLossKind kind = NoiseLossKind::L1);

}  // namespace fddm
