#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fddm/nn/adam.hpp"
#include "fddm/nn/unet.hpp"
#include "fddm/rng.hpp"
#include "fddm/schedule.hpp"

namespace fddm {

// User-facing network geometry; mapped onto nn::UNetConfig by the builders.
struct NetworkConfig {
  int levels = 5;
  int base_channels = 32;
  std::vector<int> channel_multipliers = {1, 2, 2, 4, 4};
  int groupnorm_groups = 8;
  int attention_heads = 1;
  int in_channels = 6;
  int out_channels = 1;
  int time_embedding_dim = 0;  // denoisers only; 0 selects 4 * base_channels

  [[nodiscard]] int channels_at(int level) const { return base_channels * channel_multipliers.at(level); }
  [[nodiscard]] bool operator==(const NetworkConfig&) const = default;
};

// Coarse dose predictor: plain conditional UNet (also reused as the mode-C
// refiner with different channel counts).
std::unique_ptr<nn::UNet> build_cdpm(const std::string& name, const NetworkConfig& cfg, SeededRng& rng);

// Noise predictor. With `cdpm_for_conditioning` it exposes per-level
// conditioning ports matched to that network's encoder features (add at the
// first two levels, cross-attention at the rest); without, it is conditioned
// through its input channels only.
std::unique_ptr<nn::UNet> build_hfrm(const std::string& name, const NetworkConfig& cfg,
                                     const NetworkConfig* cdpm_for_conditioning, SeededRng& rng);

struct CdpmResult {
  nn::Var coarse;
  std::vector<nn::Var> encoder_features;
};

CdpmResult cdpm_forward(const nn::UNet& model, nn::GraphContext& ctx, const nn::Var& x);

// Everything the denoiser sees besides its own state: the coarse high bands
// concatenated with the downsampled planning stack (image level), and the
// aligned coarse-network encoder features (feature level).
struct ConditioningBundle {
  nn::Var image_cond;
  std::vector<nn::Var> feature_cond;
};

// Aligns CDPM encoder features to the half-resolution denoiser: denoiser
// level i reads CDPM level i+1; the deepest level reads an average-pooled
// copy of the deepest CDPM feature. `detach` cuts the gradient path back
// into the coarse network.
ConditioningBundle make_conditioning(const nn::Var& coarse_high, const nn::Var& x_down,
                                     const std::vector<nn::Var>& cdpm_features, bool detach);

// Image-level-only variant (no coarse network in the loop).
ConditioningBundle make_image_conditioning(const nn::Var& x);

nn::Var hfrm_denoise(const nn::UNet& model, nn::GraphContext& ctx, const ConditioningBundle& cond,
                     const nn::Var& x_t, const std::vector<int>& t);

// ---- persistence ---------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[9] = "FDDMCKPT";

struct ParameterBlob {
  std::string name;
  nn::Shape shape;
  std::vector<float> values;
};

struct NetworkSnapshot {
  std::string role;  // "cdpm" | "hfrm" | "refiner"
  NetworkConfig config;
  std::vector<ParameterBlob> blobs;  // declared iteration order
};

struct OptimizerEntry {
  std::string name;
  std::int64_t steps = 0;
  std::vector<float> m, v;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string mode;  // "A".."D"
  std::int64_t train_step = 0;
  int schedule_steps = kDefaultSteps;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  std::vector<NetworkSnapshot> networks;
  std::vector<OptimizerEntry> optimizer;  // empty = not saved

  [[nodiscard]] const NetworkSnapshot* find(const std::string& role) const;
  [[nodiscard]] std::uint32_t config_digest() const;
};

NetworkSnapshot snapshot_network(const std::string& role, const NetworkConfig& cfg, nn::UNet& model);
void restore_network(nn::UNet& model, const NetworkSnapshot& snap);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fddm
