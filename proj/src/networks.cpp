#include "fddm/networks.hpp"

#include "fddm/binio.hpp"
#include "fddm/checksum.hpp"
#include "fddm/errors.hpp"

namespace fddm {

namespace {

nn::UNetConfig base_unet_config(const NetworkConfig& cfg) {
  nn::UNetConfig u;
  u.in_channels = cfg.in_channels;
  u.out_channels = cfg.out_channels;
  u.levels = cfg.levels;
  u.base_channels = cfg.base_channels;
  u.channel_multipliers = cfg.channel_multipliers;
  u.groupnorm_groups = cfg.groupnorm_groups;
  u.attention_heads = cfg.attention_heads;
  return u;
}

}  // namespace

std::unique_ptr<nn::UNet> build_cdpm(const std::string& name, const NetworkConfig& cfg, SeededRng& rng) {
  return std::make_unique<nn::UNet>(name, base_unet_config(cfg), rng);
}

std::unique_ptr<nn::UNet> build_hfrm(const std::string& name, const NetworkConfig& cfg,
                                     const NetworkConfig* cdpm_for_conditioning, SeededRng& rng) {
  nn::UNetConfig u = base_unet_config(cfg);
  u.time_conditioned = true;
  u.time_embedding_dim = cfg.time_embedding_dim;
  if (cdpm_for_conditioning != nullptr) {
    const NetworkConfig& c = *cdpm_for_conditioning;
    if (c.levels != cfg.levels)
      throw ParameterError("conditioning network must have the same level count");
    // Denoiser level i runs at the spatial size of coarse-network level i+1;
    // the deepest level reuses the deepest coarse feature (pooled once more).
    u.cond_channels.resize(static_cast<std::size_t>(cfg.levels));
    for (int i = 0; i < cfg.levels - 1; ++i)
      u.cond_channels[static_cast<std::size_t>(i)] = c.channels_at(i + 1);
    u.cond_channels[static_cast<std::size_t>(cfg.levels - 1)] = c.channels_at(cfg.levels - 1);
    u.cond_add_levels = 2;
  }
  return std::make_unique<nn::UNet>(name, u, rng);
}

CdpmResult cdpm_forward(const nn::UNet& model, nn::GraphContext& ctx, const nn::Var& x) {
  auto r = model.forward(ctx, x);
  return CdpmResult{r.out, std::move(r.encoder_features)};
}

ConditioningBundle make_conditioning(const nn::Var& coarse_high, const nn::Var& x_down,
                                     const std::vector<nn::Var>& cdpm_features, bool detach) {
  if (!coarse_high.defined() || !x_down.defined()) throw ContractError("undefined conditioning inputs");
  if (coarse_high.shape().h != x_down.shape().h || coarse_high.shape().w != x_down.shape().w ||
      coarse_high.shape().n != x_down.shape().n)
    throw DimensionError("image conditioning parts disagree: " + coarse_high.shape().str() + " vs " +
                         x_down.shape().str());
  if (cdpm_features.size() < 2) throw ContractError("need the full encoder feature list");

  auto guard = [detach](const nn::Var& v) { return detach ? nn::detach(v) : v; };

  ConditioningBundle b;
  b.image_cond = nn::concat_channels(guard(coarse_high), x_down);
  b.feature_cond.reserve(cdpm_features.size());
  for (std::size_t i = 1; i < cdpm_features.size(); ++i) b.feature_cond.push_back(guard(cdpm_features[i]));
  b.feature_cond.push_back(nn::avg_pool2(guard(cdpm_features.back())));
  return b;
}

ConditioningBundle make_image_conditioning(const nn::Var& x) {
  if (!x.defined()) throw ContractError("undefined conditioning input");
  ConditioningBundle b;
  b.image_cond = x;
  return b;
}

nn::Var hfrm_denoise(const nn::UNet& model, nn::GraphContext& ctx, const ConditioningBundle& cond,
                     const nn::Var& x_t, const std::vector<int>& t) {
  if (!x_t.defined() || !cond.image_cond.defined()) throw ContractError("undefined denoiser inputs");
  const nn::Shape& xs = x_t.shape();
  const nn::Shape& cs = cond.image_cond.shape();
  if (xs.n != cs.n || xs.h != cs.h || xs.w != cs.w)
    throw ContractError("image conditioning misaligned with diffusion state: " + cs.str() + " vs " + xs.str());
  if (static_cast<int>(t.size()) != xs.n) throw ContractError("one timestep per batch element required");
  if (xs.c + cs.c != model.config().in_channels)
    throw ContractError("state+conditioning channels (" + std::to_string(xs.c + cs.c) +
                        ") do not match network input (" + std::to_string(model.config().in_channels) + ")");
  const std::size_t expected = model.config().cond_channels.empty()
                                   ? 0
                                   : static_cast<std::size_t>(model.config().levels);
  if (cond.feature_cond.size() != expected)
    throw ContractError("expected " + std::to_string(expected) + " feature conditions, got " +
                        std::to_string(cond.feature_cond.size()));

  nn::Var input = nn::concat_channels(x_t, cond.image_cond);
  nn::Var temb = model.embed_time(ctx, t);
  auto r = model.forward(ctx, input, temb, cond.feature_cond);
  return r.out;
}

// ---- persistence -----------------------------------------------------------

namespace {

void write_network_config(BinaryWriter& w, const NetworkConfig& c) {
  w.i32(c.levels);
  w.i32(c.base_channels);
  w.u32(static_cast<std::uint32_t>(c.channel_multipliers.size()));
  for (int m : c.channel_multipliers) w.i32(m);
  w.i32(c.groupnorm_groups);
  w.i32(c.attention_heads);
  w.i32(c.in_channels);
  w.i32(c.out_channels);
  w.i32(c.time_embedding_dim);
}

NetworkConfig read_network_config(BinaryReader& r) {
  NetworkConfig c;
  c.levels = r.i32();
  c.base_channels = r.i32();
  const std::uint32_t nm = r.u32();
  if (nm > 64) throw CorruptionError("implausible multiplier count");
  c.channel_multipliers.resize(nm);
  for (auto& m : c.channel_multipliers) m = r.i32();
  c.groupnorm_groups = r.i32();
  c.attention_heads = r.i32();
  c.in_channels = r.i32();
  c.out_channels = r.i32();
  c.time_embedding_dim = r.i32();
  return c;
}

// Canonical bytes hashed into the header digest: everything that determines
// graph geometry, so a mismatched config is caught before weights load.
std::vector<std::uint8_t> digest_bytes(const Checkpoint& c) {
  BinaryWriter w;
  w.str(c.mode);
  w.i32(c.schedule_steps);
  w.f64(c.beta_start);
  w.f64(c.beta_end);
  for (const auto& n : c.networks) {
    w.str(n.role);
    write_network_config(w, n.config);
  }
  return w.bytes();
}

}  // namespace

const NetworkSnapshot* Checkpoint::find(const std::string& role) const {
  for (const auto& n : networks)
    if (n.role == role) return &n;
  return nullptr;
}

std::uint32_t Checkpoint::config_digest() const { return Crc32::of(digest_bytes(*this)); }

NetworkSnapshot snapshot_network(const std::string& role, const NetworkConfig& cfg, nn::UNet& model) {
  NetworkSnapshot snap;
  snap.role = role;
  snap.config = cfg;
  for (nn::Parameter* p : model.parameters())
    snap.blobs.push_back(ParameterBlob{p->name, p->shape, p->value});
  return snap;
}

void restore_network(nn::UNet& model, const NetworkSnapshot& snap) {
  auto params = model.parameters();
  if (params.size() != snap.blobs.size())
    throw ContractError("parameter count mismatch restoring " + snap.role + ": model has " +
                        std::to_string(params.size()) + ", snapshot has " + std::to_string(snap.blobs.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    nn::Parameter* p = params[i];
    const ParameterBlob& b = snap.blobs[i];
    if (p->name != b.name || !(p->shape == b.shape))
      throw ContractError("parameter mismatch restoring " + snap.role + ": expected " + p->name + " " +
                          p->shape.str() + ", snapshot has " + b.name + " " + b.shape.str());
    p->value = b.values;
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  BinaryWriter payload;
  payload.str(ckpt.mode);
  payload.i64(ckpt.train_step);
  payload.i32(ckpt.schedule_steps);
  payload.f64(ckpt.beta_start);
  payload.f64(ckpt.beta_end);
  payload.u32(static_cast<std::uint32_t>(ckpt.networks.size()));
  for (const auto& n : ckpt.networks) {
    payload.str(n.role);
    write_network_config(payload, n.config);
    payload.u32(static_cast<std::uint32_t>(n.blobs.size()));
    for (const auto& b : n.blobs) {
      payload.str(b.name);
      payload.i32(b.shape.n);
      payload.i32(b.shape.c);
      payload.i32(b.shape.h);
      payload.i32(b.shape.w);
      payload.u32(static_cast<std::uint32_t>(b.values.size()));
      payload.f32_array(b.values);
    }
  }
  payload.u8(ckpt.optimizer.empty() ? 0 : 1);
  if (!ckpt.optimizer.empty()) {
    payload.u32(static_cast<std::uint32_t>(ckpt.optimizer.size()));
    for (const auto& e : ckpt.optimizer) {
      payload.str(e.name);
      payload.i64(e.steps);
      payload.u32(static_cast<std::uint32_t>(e.m.size()));
      payload.f32_array(e.m);
      payload.f32_array(e.v);
    }
  }

  BinaryWriter file;
  file.raw(kCheckpointMagic, 8);
  file.u32(ckpt.version);
  file.u32(ckpt.config_digest());
  file.u64(payload.bytes().size());
  file.raw(payload.bytes().data(), payload.bytes().size());
  file.u32(Crc32::of(payload.bytes()));
  write_file_bytes(path, file.bytes());
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  BinaryReader r(bytes);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw CorruptionError(path + ": not a checkpoint file (bad magic)");
  for (int i = 0; i < 8; ++i) r.u8();

  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != kCheckpointVersion)
    throw VersionError(path + ": checkpoint format version " + std::to_string(ckpt.version) +
                       ", this build reads version " + std::to_string(kCheckpointVersion));
  const std::uint32_t stored_digest = r.u32();
  const std::uint64_t payload_size = r.u64();
  if (r.remaining() < payload_size + 4) throw CorruptionError(path + ": truncated checkpoint");
  const std::size_t payload_start = r.position();
  const std::uint32_t computed_crc = Crc32::of(bytes.data() + payload_start, payload_size);

  ckpt.mode = r.str();
  ckpt.train_step = r.i64();
  ckpt.schedule_steps = r.i32();
  ckpt.beta_start = r.f64();
  ckpt.beta_end = r.f64();
  const std::uint32_t n_networks = r.u32();
  if (n_networks > 16) throw CorruptionError(path + ": implausible network count");
  for (std::uint32_t i = 0; i < n_networks; ++i) {
    NetworkSnapshot snap;
    snap.role = r.str();
    snap.config = read_network_config(r);
    const std::uint32_t n_blobs = r.u32();
    for (std::uint32_t j = 0; j < n_blobs; ++j) {
      ParameterBlob b;
      b.name = r.str();
      b.shape.n = r.i32();
      b.shape.c = r.i32();
      b.shape.h = r.i32();
      b.shape.w = r.i32();
      const std::uint32_t count = r.u32();
      if (count != b.shape.numel()) throw CorruptionError(path + ": blob size disagrees with shape for " + b.name);
      b.values = r.f32_array(count);
      snap.blobs.push_back(std::move(b));
    }
    ckpt.networks.push_back(std::move(snap));
  }
  if (r.u8() != 0) {
    const std::uint32_t n_entries = r.u32();
    for (std::uint32_t i = 0; i < n_entries; ++i) {
      OptimizerEntry e;
      e.name = r.str();
      e.steps = r.i64();
      const std::uint32_t count = r.u32();
      e.m = r.f32_array(count);
      e.v = r.f32_array(count);
      ckpt.optimizer.push_back(std::move(e));
    }
  }
  if (r.position() != payload_start + payload_size)
    throw CorruptionError(path + ": payload size disagrees with content");
  const std::uint32_t stored_crc = r.u32();
  if (stored_crc != computed_crc) throw CorruptionError(path + ": checksum mismatch");
  if (stored_digest != ckpt.config_digest()) throw CorruptionError(path + ": config digest mismatch");
  return ckpt;
}

}  // namespace fddm
