#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fddm/nn/layers.hpp"

namespace fddm::nn {

// Geometry of one UNet. Both networks share this structure; the denoiser
// additionally enables time conditioning and per-level feature conditioning.
struct UNetConfig {
  int in_channels = 1;
  int out_channels = 1;
  int levels = 5;
  int base_channels = 32;
  std::vector<int> channel_multipliers = {1, 2, 2, 4, 4};
  int groupnorm_groups = 8;
  int attention_heads = 1;
  bool time_conditioned = false;
  int time_embedding_dim = 0;     // 0 with time_conditioned selects 4 * base_channels
  std::vector<int> cond_channels; // per-level conditioning feature channels; empty = none
  int cond_add_levels = 2;        // first N levels add conditioning, the rest cross-attend

  void validate() const;
  [[nodiscard]] int channels_at(int level) const { return base_channels * channel_multipliers.at(level); }
  [[nodiscard]] int temb_dim() const {
    if (!time_conditioned) return 0;
    return time_embedding_dim > 0 ? time_embedding_dim : 4 * base_channels;
  }
};

// Encoder/decoder UNet with a self-attention bottleneck.
//
// Encoder module i: ResBlock to channels_at(i) (+ optional conditioning),
// followed by a stride-2 3x3 conv except on the deepest module. Decoder
// module j mirrors it: nearest-neighbour upsample + 1x1 conv, concatenation
// of the matching encoder feature, then two ResBlocks; the final module has
// no upsample or skip. A 3x3 conv maps back to out_channels.
class UNet {
 public:
  UNet(const std::string& name, UNetConfig config, SeededRng& rng);
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  struct Result {
    Var out;
    std::vector<Var> encoder_features;  // post-ResBlock activation per encoder module
  };

  // `temb` is required iff time-conditioned; `cond` must carry one feature
  // map per level iff conditioning is configured.
  Result forward(GraphContext& ctx, const Var& x, const Var& temb = Var(),
                 const std::vector<Var>& cond = {}) const;

  // Embeds integer steps through the sinusoidal basis and the learned MLP.
  Var embed_time(GraphContext& ctx, const std::vector<int>& t) const;

  [[nodiscard]] std::vector<Parameter*> parameters();
  [[nodiscard]] std::int64_t parameter_count();
  [[nodiscard]] const UNetConfig& config() const { return config_; }
  [[nodiscard]] const std::string& name() const { return name_; }

 private:
  std::string name_;
  UNetConfig config_;

  std::vector<ResBlock> enc_res_;
  std::vector<Conv2dLayer> enc_down_;          // levels - 1 entries
  std::vector<AddCondition> cond_add_;         // first cond_add_levels entries
  std::vector<CrossAttention> cond_attn_;      // remaining conditioned levels
  std::unique_ptr<ResBlock> mid_a_, mid_b_;
  std::unique_ptr<SelfAttention> mid_attn_;
  std::vector<Conv2dLayer> up_proj_;           // levels - 1 entries (1x1 after upsample)
  std::vector<ResBlock> dec_res_;              // 2 per decoder module
  std::unique_ptr<Conv2dLayer> head_;
  std::unique_ptr<LinearLayer> temb_fc1_, temb_fc2_;
};

}  // namespace fddm::nn
