#include "fddm/nn/unet.hpp"

#include <cmath>

#include "fddm/errors.hpp"

namespace fddm::nn {

Tensor sinusoidal_embedding(const std::vector<int>& t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ParameterError("embedding dim must be even and >= 2");
  const int n = static_cast<int>(t.size());
  const int half = dim / 2;
  Tensor out(Shape{n, dim, 1, 1});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < half; ++j) {
      const double freq =
          half > 1 ? std::exp(-std::log(10000.0) * static_cast<double>(j) / (half - 1)) : 1.0;
      const double angle = static_cast<double>(t[static_cast<std::size_t>(i)]) * freq;
      out[static_cast<std::size_t>(i) * dim + 2 * j] = std::sin(angle);
      out[static_cast<std::size_t>(i) * dim + 2 * j + 1] = std::cos(angle);
    }
  }
  return out;
}

void UNetConfig::validate() const {
  if (levels < 2) throw ParameterError("UNet needs at least 2 levels");
  if (static_cast<int>(channel_multipliers.size()) != levels)
    throw ParameterError("channel_multipliers must list one entry per level");
  if (in_channels < 1 || out_channels < 1 || base_channels < 1)
    throw ParameterError("channel counts must be positive");
  if (attention_heads < 1) throw ParameterError("attention_heads must be positive");
  for (int i = 0; i < levels; ++i) {
    if (channels_at(i) % groupnorm_groups != 0)
      throw ParameterError("channels at level " + std::to_string(i + 1) + " not divisible by groupnorm groups");
    if (channels_at(i) % attention_heads != 0)
      throw ParameterError("channels at level " + std::to_string(i + 1) + " not divisible by attention heads");
  }
  if (!cond_channels.empty() && static_cast<int>(cond_channels.size()) != levels)
    throw ParameterError("cond_channels must list one entry per level");
  if (cond_add_levels < 0 || cond_add_levels > levels)
    throw ParameterError("cond_add_levels out of range");
}

UNet::UNet(const std::string& name, UNetConfig config, SeededRng& rng)
    : name_(name), config_(std::move(config)) {
  config_.validate();
  const int L = config_.levels;
  const int groups = config_.groupnorm_groups;
  const int temb = config_.temb_dim();

  if (config_.time_conditioned) {
    temb_fc1_ = std::make_unique<LinearLayer>(name_ + ".temb.fc1", temb, temb, rng);
    temb_fc2_ = std::make_unique<LinearLayer>(name_ + ".temb.fc2", temb, temb, rng);
  }

  enc_res_.reserve(static_cast<std::size_t>(L));
  enc_down_.reserve(static_cast<std::size_t>(L - 1));
  const bool conditioned = !config_.cond_channels.empty();
  if (conditioned) {
    cond_add_.reserve(static_cast<std::size_t>(config_.cond_add_levels));
    cond_attn_.reserve(static_cast<std::size_t>(L - config_.cond_add_levels));
  }
  int ch = config_.in_channels;
  for (int i = 0; i < L; ++i) {
    const int out = config_.channels_at(i);
    const std::string prefix = name_ + ".enc" + std::to_string(i + 1);
    enc_res_.emplace_back(prefix + ".rb", ch, out, groups, temb, rng);
    if (conditioned) {
      if (i < config_.cond_add_levels)
        cond_add_.emplace_back(prefix + ".cond", out, config_.cond_channels[static_cast<std::size_t>(i)], rng);
      else
        cond_attn_.emplace_back(prefix + ".cond", out, config_.cond_channels[static_cast<std::size_t>(i)], groups,
                                config_.attention_heads, rng);
    }
    if (i < L - 1) enc_down_.emplace_back(prefix + ".down", out, out, 3, 2, rng);
    ch = out;
  }

  mid_a_ = std::make_unique<ResBlock>(name_ + ".mid.rb1", ch, ch, groups, temb, rng);
  mid_attn_ = std::make_unique<SelfAttention>(name_ + ".mid.attn", ch, groups, config_.attention_heads, rng);
  mid_b_ = std::make_unique<ResBlock>(name_ + ".mid.rb2", ch, ch, groups, temb, rng);

  up_proj_.reserve(static_cast<std::size_t>(L - 1));
  dec_res_.reserve(static_cast<std::size_t>(2 * L));
  for (int j = 0; j < L; ++j) {
    const std::string prefix = name_ + ".dec" + std::to_string(j + 1);
    if (j < L - 1) {
      // Upsamples from level L-1-j down to level L-2-j, then consumes that
      // encoder module's skip feature.
      const int target = config_.channels_at(L - 2 - j);
      up_proj_.emplace_back(prefix + ".up", ch, ch, 1, 1, rng);
      dec_res_.emplace_back(prefix + ".rb1", ch + target, target, groups, temb, rng);
      dec_res_.emplace_back(prefix + ".rb2", target, target, groups, temb, rng);
      ch = target;
    } else {
      dec_res_.emplace_back(prefix + ".rb1", ch, ch, groups, temb, rng);
      dec_res_.emplace_back(prefix + ".rb2", ch, ch, groups, temb, rng);
    }
  }

  head_ = std::make_unique<Conv2dLayer>(name_ + ".head", ch, config_.out_channels, 3, 1, rng);
}

Var UNet::embed_time(GraphContext& ctx, const std::vector<int>& t) const {
  if (!config_.time_conditioned) throw ContractError("network is not time-conditioned");
  Var base = constant(sinusoidal_embedding(t, config_.temb_dim()));
  return temb_fc2_->forward(ctx, silu(temb_fc1_->forward(ctx, base)));
}

UNet::Result UNet::forward(GraphContext& ctx, const Var& x, const Var& temb,
                           const std::vector<Var>& cond) const {
  if (!x.defined()) throw ContractError("undefined input");
  if (x.shape().c != config_.in_channels)
    throw DimensionError("expected " + std::to_string(config_.in_channels) + " input channels, got " +
                         std::to_string(x.shape().c));
  const int L = config_.levels;
  const int down = 1 << (L - 1);
  if (x.shape().h % down != 0 || x.shape().w % down != 0)
    throw DimensionError("spatial size must be divisible by " + std::to_string(down));
  if (config_.time_conditioned && !temb.defined()) throw ContractError("missing time embedding");
  const bool conditioned = !config_.cond_channels.empty();
  if (conditioned && static_cast<int>(cond.size()) != L)
    throw ContractError("expected " + std::to_string(L) + " conditioning features, got " +
                        std::to_string(cond.size()));
  if (!conditioned && !cond.empty()) throw ContractError("network takes no conditioning features");

  Result res;
  res.encoder_features.reserve(static_cast<std::size_t>(L));
  Var h = x;
  for (int i = 0; i < L; ++i) {
    h = enc_res_[static_cast<std::size_t>(i)].forward(ctx, h, temb);
    if (conditioned) {
      const Var& c = cond[static_cast<std::size_t>(i)];
      if (!c.defined()) throw ContractError("undefined conditioning feature at level " + std::to_string(i + 1));
      if (c.shape().h != h.shape().h || c.shape().w != h.shape().w ||
          c.shape().c != config_.cond_channels[static_cast<std::size_t>(i)] || c.shape().n != h.shape().n)
        throw DimensionError("conditioning feature mismatch at level " + std::to_string(i + 1) + ": got " +
                             c.shape().str() + " for " + h.shape().str());
      if (i < config_.cond_add_levels)
        h = cond_add_[static_cast<std::size_t>(i)].forward(ctx, h, c);
      else
        h = cond_attn_[static_cast<std::size_t>(i - config_.cond_add_levels)].forward(ctx, h, c);
    }
    res.encoder_features.push_back(h);
    if (i < L - 1) h = enc_down_[static_cast<std::size_t>(i)].forward(ctx, h);
  }

  h = mid_a_->forward(ctx, h, temb);
  h = mid_attn_->forward(ctx, h);
  h = mid_b_->forward(ctx, h, temb);

  for (int j = 0; j < L; ++j) {
    if (j < L - 1) {
      h = up_proj_[static_cast<std::size_t>(j)].forward(ctx, nearest_upsample2(h));
      h = concat_channels(h, res.encoder_features[static_cast<std::size_t>(L - 2 - j)]);
    }
    h = dec_res_[static_cast<std::size_t>(2 * j)].forward(ctx, h, temb);
    h = dec_res_[static_cast<std::size_t>(2 * j + 1)].forward(ctx, h, temb);
  }

  res.out = head_->forward(ctx, h);
  return res;
}

std::vector<Parameter*> UNet::parameters() {
  std::vector<Parameter*> out;
  if (temb_fc1_) {
    temb_fc1_->collect(out);
    temb_fc2_->collect(out);
  }
  const bool conditioned = !config_.cond_channels.empty();
  for (int i = 0; i < config_.levels; ++i) {
    enc_res_[static_cast<std::size_t>(i)].collect(out);
    if (conditioned) {
      if (i < config_.cond_add_levels)
        cond_add_[static_cast<std::size_t>(i)].collect(out);
      else
        cond_attn_[static_cast<std::size_t>(i - config_.cond_add_levels)].collect(out);
    }
    if (i < config_.levels - 1) enc_down_[static_cast<std::size_t>(i)].collect(out);
  }
  mid_a_->collect(out);
  mid_attn_->collect(out);
  mid_b_->collect(out);
  for (int j = 0; j < config_.levels; ++j) {
    if (j < config_.levels - 1) up_proj_[static_cast<std::size_t>(j)].collect(out);
    dec_res_[static_cast<std::size_t>(2 * j)].collect(out);
    dec_res_[static_cast<std::size_t>(2 * j + 1)].collect(out);
  }
  head_->collect(out);
  return out;
}

std::int64_t UNet::parameter_count() {
  std::int64_t n = 0;
  for (Parameter* p : parameters()) n += static_cast<std::int64_t>(p->numel());
  return n;
}

}  // namespace fddm::nn
