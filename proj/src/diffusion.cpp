#include "fddm/diffusion.hpp"

#include <cmath>
#include <string>

namespace fddm {

namespace {

void check_step(int t, const NoiseSchedule& s) {
  if (!s.valid_step(t))
    throw ParameterError("step " + std::to_string(t) + " outside schedule 1.." + std::to_string(s.steps));
}

void check_same_shape(const ChannelStack& a, const ChannelStack& b, const char* what) {
  if (!a.same_shape(b)) throw DimensionError(std::string(what) + ": stack shapes differ");
}

}  // namespace

ChannelStack gaussian_like(int channels, int height, int width, SeededRng& rng) {
  ChannelStack out(channels, height, width);
  for (double& v : out.values) v = rng.normal();
  return out;
}

ChannelStack q_sample(const ChannelStack& x0, int t, const ChannelStack& eps, const NoiseSchedule& s) {
  check_step(t, s);
  check_same_shape(x0, eps, "q_sample");
  const double signal = std::sqrt(s.alpha_bar[t]);
  const double noise = std::sqrt(1.0 - s.alpha_bar[t]);
  ChannelStack out(x0.channels, x0.height, x0.width);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = signal * x0.values[i] + noise * eps.values[i];
  return out;
}

ChannelStack q_step(const ChannelStack& x_prev, int t, const NoiseSchedule& s, SeededRng& rng) {
  check_step(t, s);
  const double keep = std::sqrt(1.0 - s.beta[t]);
  const double add = std::sqrt(s.beta[t]);
  ChannelStack out(x_prev.channels, x_prev.height, x_prev.width);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = keep * x_prev.values[i] + add * rng.normal();
  return out;
}

ChannelStack reverse_mean(const ChannelStack& x_t, const ChannelStack& eps_pred, int t, const NoiseSchedule& s) {
  check_step(t, s);
  check_same_shape(x_t, eps_pred, "reverse_mean");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[t]);
  const double eps_coef = (1.0 - s.alpha[t]) / std::sqrt(1.0 - s.alpha_bar[t]);
  ChannelStack out(x_t.channels, x_t.height, x_t.width);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values[i] = inv_sqrt_alpha * (x_t.values[i] - eps_coef * eps_pred.values[i]);
  return out;
}

ChannelStack p_sample(const DenoiserFn& denoiser, const ChannelStack& x_t, int t, const NoiseSchedule& s,
                      SeededRng& rng) {
  check_step(t, s);
  ChannelStack eps_pred = denoiser(x_t, t);
  if (!eps_pred.same_shape(x_t)) throw ContractError("denoiser returned a differently shaped prediction");
  ChannelStack out = reverse_mean(x_t, eps_pred, t, s);
  if (t > 1) {
    const double sigma = std::sqrt(s.sigma2[t]);
    for (double& v : out.values) v += sigma * rng.normal();
  }
  return out;
}

ChannelStack sample_loop(const DenoiserFn& denoiser, int channels, int height, int width, const NoiseSchedule& s,
                         SeededRng& rng, int stride) {
  if (stride < 1) throw ParameterError("stride must be positive");
  if (s.steps % stride != 0)
    throw ParameterError("stride " + std::to_string(stride) + " does not divide the schedule of " +
                         std::to_string(s.steps) + " steps");

  ChannelStack x = gaussian_like(channels, height, width, rng);
  if (stride == 1) {
    for (int t = s.steps; t >= 1; --t) x = p_sample(denoiser, x, t, s, rng);
    return x;
  }

  // Strided traversal walks the sub-schedule t_k = k * stride. Reusing the
  // single-step beta[t] there would remove only 1/stride of the accumulated
  // noise (each visit undoes one step's variance but jumps stride steps), so
  // the chain would come back still dominated by noise. The transition
  // t_k -> t_{k-1} instead gets the variance that the forward process truly
  // added between those two marginals: beta'_k = 1 - abar[t_k]/abar[t_{k-1}].
  // The cumulative products then telescope, so abar'[k] = abar[t_k] exactly
  // and the denoiser still sees states with the marginals it was trained on.
  const int visits = s.steps / stride;
  NoiseSchedule sub;
  sub.steps = visits;
  sub.beta.assign(static_cast<std::size_t>(visits) + 1, 0.0);
  sub.alpha.assign(static_cast<std::size_t>(visits) + 1, 0.0);
  sub.alpha_bar.assign(static_cast<std::size_t>(visits) + 1, 0.0);
  sub.sigma2.assign(static_cast<std::size_t>(visits) + 1, 0.0);
  for (int k = 1; k <= visits; ++k) {
    const double prev_bar = k == 1 ? 1.0 : s.alpha_bar[(k - 1) * stride];
    sub.alpha[k] = s.alpha_bar[k * stride] / prev_bar;
    sub.beta[k] = 1.0 - sub.alpha[k];
    sub.alpha_bar[k] = s.alpha_bar[k * stride];
    sub.sigma2[k] = sub.beta[k];
  }

  DenoiserFn at_original_step = [&](const ChannelStack& state, int k) { return denoiser(state, k * stride); };
  for (int k = visits; k >= 1; --k) x = p_sample(at_original_step, x, k, sub, rng);
  return x;
}

double noise_loss(const ChannelStack& eps_true, const ChannelStack& eps_pred, NoiseLossKind kind) {
  check_same_shape(eps_true, eps_pred, "noise_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < eps_true.size(); ++i) {
    const double d = eps_true.values[i] - eps_pred.values[i];
    acc += kind == NoiseLossKind::L1 ? std::fabs(d) : d * d;
  }
  return acc / static_cast<double>(eps_true.size());
}

}  // namespace fddm
