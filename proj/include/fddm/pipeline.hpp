#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fddm/diffusion.hpp"
#include "fddm/metrics.hpp"
#include "fddm/networks.hpp"
#include "fddm/phantom.hpp"
#include "fddm/runconfig.hpp"

namespace fddm {

// The four experiment arms: coarse predictor alone, diffusion directly on
// the dose image, coarse + CNN refiner on the high bands, and the full
// coarse + wavelet-domain diffusion pipeline.
enum class PipelineMode { CoarseOnly, DiffusionDirect, CoarseCnnRefine, Full };

PipelineMode mode_from_string(const std::string& s);  // "A" | "B" | "C" | "D"
std::string mode_to_string(PipelineMode mode);

inline constexpr int kPlanningChannels = 6;  // CT + {PTV, ST, FHL, FHR, BLD}

// Dose <-> network units: [-1, 1] with 10% headroom over prescription.
inline constexpr double kDoseHeadroom = 1.1;
inline double normalize_dose(double gy, double prescription) {
  return 2.0 * gy / (kDoseHeadroom * prescription) - 1.0;
}
inline double denormalize_dose(double v, double prescription) {
  return (v + 1.0) * 0.5 * kDoseHeadroom * prescription;
}

struct TrainConfig {
  PipelineMode mode = PipelineMode::Full;
  int epochs = 1;
  std::int64_t max_steps = 0;  // 0: derive from epochs and dataset size
  double learning_rate = 1e-4;
  int batch_size = 16;
  int diffusion_steps = kDefaultSteps;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  NoiseLossKind hfrm_loss = NoiseLossKind::L1;
  std::uint64_t seed = 0;
  bool end_to_end = true;       // let the denoiser loss reach the coarse network
  int eval_stride = 20;         // validation-time sampling stride
  std::int64_t checkpoint_every = 500;
  NetworkConfig network;        // geometry; per-mode channel counts derived at build

  // The total loss is a plain 1:1 sum of the two terms by design.
  static constexpr double kLossWeightCdpm = 1.0;
  static constexpr double kLossWeightHfrm = 1.0;

  static TrainConfig from_config(RunConfig& rc);
  void validate() const;
};

struct LossReport {
  double l_cdpm = 0.0;
  double l_hfrm = 0.0;
  double l_total = 0.0;
  std::int64_t step = 0;
  int epoch = 0;
};

// Networks + schedule for one mode, the in-memory image of a checkpoint.
struct ModelSet {
  PipelineMode mode = PipelineMode::Full;
  NetworkConfig cdpm_cfg, denoiser_cfg, refiner_cfg;
  std::unique_ptr<nn::UNet> cdpm;      // A, C, D
  std::unique_ptr<nn::UNet> denoiser;  // B, D
  std::unique_ptr<nn::UNet> refiner;   // C
  NoiseSchedule schedule;              // B, D (defaulted otherwise)
  std::int64_t step = 0;

  static ModelSet build(const TrainConfig& cfg);
  static ModelSet from_checkpoint(const Checkpoint& ckpt);
  [[nodiscard]] Checkpoint to_checkpoint(const nn::Adam* optimizer);
  void restore_optimizer(nn::Adam& optimizer, const Checkpoint& ckpt);

  [[nodiscard]] std::vector<nn::Parameter*> trainable_parameters();
};

// One optimizer update on a batch. Draws per-element timesteps and noise
// from `rng`; throws NumericError with a diagnostic dump on non-finite loss.
LossReport train_step(ModelSet& models, nn::Adam& optimizer,
                      const std::vector<const PlanningSample*>& batch, SeededRng& rng,
                      const TrainConfig& cfg);

// Deterministic steps-driven loop: batch composition and noise for step k
// depend only on (cfg.seed, k), so resuming from a checkpoint replays the
// remaining steps exactly.
void train_loop(ModelSet& models, nn::Adam& optimizer, const std::vector<PlanningSample>& train_set,
                const TrainConfig& cfg, std::int64_t target_step, const std::string& checkpoint_path,
                const std::string& csv_path, const std::function<void(const LossReport&)>& on_step = {});

struct Prediction {
  Grid2D dose_gy;      // final output, clamped to >= 0
  Grid2D recon_norm;   // pre-clamp prediction in network units
  Grid2D coarse_norm;  // coarse network output (empty for mode B)
};

Prediction predict(ModelSet& models, const PlanningSample& sample, int stride, std::uint64_t noise_seed);

// Mean normalized coarse-prediction L1 over a sample set (mode A metric).
double coarse_l1(ModelSet& models, const std::vector<PlanningSample>& samples);

// sqrt(sum ||high(pred)||^2 / sum ||high(truth)||^2) over paired dose maps.
double high_band_energy_ratio(const std::vector<Grid2D>& pred, const std::vector<Grid2D>& truth);

// ---- speed benchmark -------------------------------------------------------

struct BenchReport {
  int height = 0, width = 0;
  int trials = 0;
  int image_elems = 0, wavelet_elems = 0;        // spatial positions per denoiser call
  double image_median_ms = 0.0, wavelet_median_ms = 0.0;
  double speedup = 0.0;                          // image / wavelet
  int projected_steps = 0;
  double image_total_s = 0.0, wavelet_total_s = 0.0;  // median * steps
};

// Times one denoiser forward in the image domain (full resolution, mode-B
// geometry) vs the wavelet domain (half resolution x 3 channels, mode-D
// geometry) at matched network configs.
BenchReport benchmark_step_cost(const NetworkConfig& base, int height, int width, int trials,
                                std::uint64_t seed, int projected_steps = kDefaultSteps);

}  // namespace fddm
