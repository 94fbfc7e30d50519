#include "fddm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "fddm/wavelet.hpp"

namespace fddm {

PipelineMode mode_from_string(const std::string& s) {
  if (s == "A") return PipelineMode::CoarseOnly;
  if (s == "B") return PipelineMode::DiffusionDirect;
  if (s == "C") return PipelineMode::CoarseCnnRefine;
  if (s == "D") return PipelineMode::Full;
  throw ConfigError("unknown mode '" + s + "' (expected A, B, C or D)");
}

std::string mode_to_string(PipelineMode mode) {
  switch (mode) {
    case PipelineMode::CoarseOnly: return "A";
    case PipelineMode::DiffusionDirect: return "B";
    case PipelineMode::CoarseCnnRefine: return "C";
    case PipelineMode::Full: return "D";
  }
  throw ContractError("unreachable");
}

TrainConfig TrainConfig::from_config(RunConfig& rc) {
  TrainConfig c;
  c.mode = mode_from_string(rc.get_str("mode", "D"));
  c.epochs = rc.get_int("epochs", c.epochs);
  c.max_steps = rc.get_i64("max_steps", c.max_steps);
  c.learning_rate = rc.get_double("learning_rate", c.learning_rate);
  c.batch_size = rc.get_int("batch_size", c.batch_size);
  c.diffusion_steps = rc.get_int("diffusion_steps", c.diffusion_steps);
  c.beta_start = rc.get_double("beta_start", c.beta_start);
  c.beta_end = rc.get_double("beta_end", c.beta_end);
  const std::string loss = rc.get_str("hfrm_loss", "l1");
  if (loss == "l1")
    c.hfrm_loss = NoiseLossKind::L1;
  else if (loss == "l2")
    c.hfrm_loss = NoiseLossKind::L2;
  else
    throw ConfigError("hfrm_loss must be 'l1' or 'l2'");
  c.seed = rc.get_u64("seed", c.seed);
  c.end_to_end = rc.get_bool("end_to_end", c.end_to_end);
  c.eval_stride = rc.get_int("eval_stride", c.eval_stride);
  c.checkpoint_every = rc.get_i64("checkpoint_every", c.checkpoint_every);
  c.network.levels = rc.get_int("levels", c.network.levels);
  c.network.base_channels = rc.get_int("base_channels", c.network.base_channels);
  c.network.channel_multipliers = rc.get_int_list("channel_multipliers", c.network.channel_multipliers);
  c.network.groupnorm_groups = rc.get_int("groupnorm_groups", c.network.groupnorm_groups);
  c.network.attention_heads = rc.get_int("attention_heads", c.network.attention_heads);
  c.network.time_embedding_dim = rc.get_int("time_embedding_dim", c.network.time_embedding_dim);
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 0 || max_steps < 0) throw ConfigError("epochs and max_steps must be non-negative");
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (diffusion_steps < 1) throw ConfigError("diffusion_steps must be positive");
  if (eval_stride < 1 || diffusion_steps % eval_stride != 0)
    throw ConfigError("eval_stride must divide diffusion_steps");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive");
}

// ---- tensor glue -------------------------------------------------------------

namespace {

void check_batch(const std::vector<const PlanningSample*>& batch) {
  if (batch.empty()) throw ParameterError("empty batch");
  for (const auto* s : batch) {
    if (s == nullptr) throw ContractError("null sample in batch");
    if (s->ct.height != batch[0]->ct.height || s->ct.width != batch[0]->ct.width)
      throw DimensionError("batch slices must share dimensions");
  }
}

void copy_channel(nn::Tensor& t, int n, int c, const Grid2D& g) {
  for (int r = 0; r < g.height; ++r)
    for (int col = 0; col < g.width; ++col) t.at(n, c, r, col) = g.at(r, col);
}

nn::Tensor batch_inputs(const std::vector<const PlanningSample*>& batch) {
  const int n = static_cast<int>(batch.size());
  const int h = batch[0]->ct.height, w = batch[0]->ct.width;
  nn::Tensor x(nn::Shape{n, kPlanningChannels, h, w});
  for (int i = 0; i < n; ++i) {
    const PlanningSample& s = *batch[static_cast<std::size_t>(i)];
    copy_channel(x, i, 0, s.ct);
    copy_channel(x, i, 1, s.mask_ptv);
    copy_channel(x, i, 2, s.mask_st);
    copy_channel(x, i, 3, s.mask_fhl);
    copy_channel(x, i, 4, s.mask_fhr);
    copy_channel(x, i, 5, s.mask_bld);
  }
  return x;
}

nn::Tensor batch_doses_norm(const std::vector<const PlanningSample*>& batch) {
  const int n = static_cast<int>(batch.size());
  const int h = batch[0]->dose.height, w = batch[0]->dose.width;
  nn::Tensor y(nn::Shape{n, 1, h, w});
  for (int i = 0; i < n; ++i) {
    const PlanningSample& s = *batch[static_cast<std::size_t>(i)];
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) y.at(i, 0, r, c) = normalize_dose(s.dose.at(r, c), s.prescription);
  }
  return y;
}

Grid2D grid_from_channel(const nn::Tensor& t, int n, int c) {
  Grid2D g(t.shape.h, t.shape.w);
  for (int r = 0; r < t.shape.h; ++r)
    for (int col = 0; col < t.shape.w; ++col) g.at(r, col) = t.at(n, c, r, col);
  return g;
}

nn::Tensor stack_to_tensor(const ChannelStack& s) {
  nn::Tensor t(nn::Shape{1, s.channels, s.height, s.width});
  std::copy(s.values.begin(), s.values.end(), t.data());
  return t;
}

ChannelStack tensor_to_stack(const nn::Tensor& t) {
  if (t.shape.n != 1) throw ContractError("expected a single-sample tensor");
  ChannelStack s(t.shape.c, t.shape.h, t.shape.w);
  std::copy(t.data(), t.data() + t.numel(), s.values.begin());
  return s;
}

// Per-element closed-form forward marginal with independent timesteps.
nn::Tensor q_sample_batch(const nn::Tensor& x0, const std::vector<int>& ts, const nn::Tensor& eps,
                          const NoiseSchedule& s) {
  nn::Tensor out(x0.shape);
  const std::size_t per = x0.numel() / static_cast<std::size_t>(x0.shape.n);
  for (int i = 0; i < x0.shape.n; ++i) {
    const int t = ts[static_cast<std::size_t>(i)];
    if (!s.valid_step(t)) throw ParameterError("timestep out of schedule range");
    const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    const std::size_t off = static_cast<std::size_t>(i) * per;
    for (std::size_t k = 0; k < per; ++k) out[off + k] = a * x0[off + k] + b * eps[off + k];
  }
  return out;
}

nn::Tensor random_normal_tensor(nn::Shape shape, SeededRng& rng) {
  nn::Tensor t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
  return t;
}

double max_abs_param(nn::UNet* net) {
  double m = 0.0;
  if (net == nullptr) return m;
  for (const nn::Parameter* p : net->parameters())
    for (float v : p->value) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

}  // namespace

// ---- model set ----------------------------------------------------------------

ModelSet ModelSet::build(const TrainConfig& cfg) {
  ModelSet m;
  m.mode = cfg.mode;
  m.schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);
  SeededRng rng(mix_seed(cfg.seed, 0x494E4954ull));  // init stream, distinct from data/noise

  NetworkConfig base = cfg.network;
  switch (cfg.mode) {
    case PipelineMode::CoarseOnly: {
      m.cdpm_cfg = base;
      m.cdpm_cfg.in_channels = kPlanningChannels;
      m.cdpm_cfg.out_channels = 1;
      m.cdpm = build_cdpm("cdpm", m.cdpm_cfg, rng);
      break;
    }
    case PipelineMode::DiffusionDirect: {
      m.denoiser_cfg = base;
      m.denoiser_cfg.in_channels = 1 + kPlanningChannels;
      m.denoiser_cfg.out_channels = 1;
      m.denoiser = build_hfrm("hfrm", m.denoiser_cfg, nullptr, rng);
      break;
    }
    case PipelineMode::CoarseCnnRefine: {
      m.cdpm_cfg = base;
      m.cdpm_cfg.in_channels = kPlanningChannels;
      m.cdpm_cfg.out_channels = 1;
      m.cdpm = build_cdpm("cdpm", m.cdpm_cfg, rng);
      m.refiner_cfg = base;
      m.refiner_cfg.in_channels = 3 + kPlanningChannels;
      m.refiner_cfg.out_channels = 3;
      m.refiner = build_cdpm("refiner", m.refiner_cfg, rng);
      break;
    }
    case PipelineMode::Full: {
      m.cdpm_cfg = base;
      m.cdpm_cfg.in_channels = kPlanningChannels;
      m.cdpm_cfg.out_channels = 1;
      m.cdpm = build_cdpm("cdpm", m.cdpm_cfg, rng);
      m.denoiser_cfg = base;
      m.denoiser_cfg.in_channels = 3 + 3 + kPlanningChannels;
      m.denoiser_cfg.out_channels = 3;
      m.denoiser = build_hfrm("hfrm", m.denoiser_cfg, &m.cdpm_cfg, rng);
      break;
    }
  }
  return m;
}

ModelSet ModelSet::from_checkpoint(const Checkpoint& ckpt) {
  ModelSet m;
  m.mode = mode_from_string(ckpt.mode);
  m.schedule = make_schedule(ckpt.schedule_steps, ckpt.beta_start, ckpt.beta_end);
  m.step = ckpt.train_step;
  SeededRng rng(0);  // placeholder init; every weight is overwritten below

  const NetworkSnapshot* cdpm_snap = ckpt.find("cdpm");
  const NetworkSnapshot* hfrm_snap = ckpt.find("hfrm");
  const NetworkSnapshot* refiner_snap = ckpt.find("refiner");

  auto expect = [&](const NetworkSnapshot* snap, const char* role) {
    if (snap == nullptr) throw CorruptionError("checkpoint for mode " + ckpt.mode + " lacks " + role + " weights");
    return snap;
  };

  switch (m.mode) {
    case PipelineMode::CoarseOnly:
      m.cdpm_cfg = expect(cdpm_snap, "cdpm")->config;
      m.cdpm = build_cdpm("cdpm", m.cdpm_cfg, rng);
      restore_network(*m.cdpm, *cdpm_snap);
      break;
    case PipelineMode::DiffusionDirect:
      m.denoiser_cfg = expect(hfrm_snap, "hfrm")->config;
      m.denoiser = build_hfrm("hfrm", m.denoiser_cfg, nullptr, rng);
      restore_network(*m.denoiser, *hfrm_snap);
      break;
    case PipelineMode::CoarseCnnRefine:
      m.cdpm_cfg = expect(cdpm_snap, "cdpm")->config;
      m.cdpm = build_cdpm("cdpm", m.cdpm_cfg, rng);
      restore_network(*m.cdpm, *cdpm_snap);
      m.refiner_cfg = expect(refiner_snap, "refiner")->config;
      m.refiner = build_cdpm("refiner", m.refiner_cfg, rng);
      restore_network(*m.refiner, *refiner_snap);
      break;
    case PipelineMode::Full:
      m.cdpm_cfg = expect(cdpm_snap, "cdpm")->config;
      m.cdpm = build_cdpm("cdpm", m.cdpm_cfg, rng);
      restore_network(*m.cdpm, *cdpm_snap);
      m.denoiser_cfg = expect(hfrm_snap, "hfrm")->config;
      m.denoiser = build_hfrm("hfrm", m.denoiser_cfg, &m.cdpm_cfg, rng);
      restore_network(*m.denoiser, *hfrm_snap);
      break;
  }
  return m;
}

Checkpoint ModelSet::to_checkpoint(const nn::Adam* optimizer) {
  Checkpoint ckpt;
  ckpt.mode = mode_to_string(mode);
  ckpt.train_step = step;
  ckpt.schedule_steps = schedule.steps;
  ckpt.beta_start = schedule.beta[1];
  ckpt.beta_end = schedule.beta[static_cast<std::size_t>(schedule.steps)];
  if (cdpm) ckpt.networks.push_back(snapshot_network("cdpm", cdpm_cfg, *cdpm));
  if (denoiser) ckpt.networks.push_back(snapshot_network("hfrm", denoiser_cfg, *denoiser));
  if (refiner) ckpt.networks.push_back(snapshot_network("refiner", refiner_cfg, *refiner));
  if (optimizer != nullptr) {
    for (nn::Parameter* p : trainable_parameters()) {
      const nn::Adam::State* st = optimizer->state_of(p);
      if (st == nullptr) continue;
      ckpt.optimizer.push_back(OptimizerEntry{p->name, st->steps, st->m, st->v});
    }
  }
  return ckpt;
}

void ModelSet::restore_optimizer(nn::Adam& optimizer, const Checkpoint& ckpt) {
  std::unordered_map<std::string, nn::Parameter*> by_name;
  for (nn::Parameter* p : trainable_parameters()) by_name[p->name] = p;
  for (const auto& e : ckpt.optimizer) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw ContractError("optimizer state for unknown parameter " + e.name);
    optimizer.restore(it->second, nn::Adam::State{e.m, e.v, e.steps});
  }
}

std::vector<nn::Parameter*> ModelSet::trainable_parameters() {
  std::vector<nn::Parameter*> out;
  for (nn::UNet* net : {cdpm.get(), denoiser.get(), refiner.get()}) {
    if (net == nullptr) continue;
    auto ps = net->parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

// ---- training -----------------------------------------------------------------

LossReport train_step(ModelSet& models, nn::Adam& optimizer,
                      const std::vector<const PlanningSample*>& batch, SeededRng& rng,
                      const TrainConfig& cfg) {
  check_batch(batch);
  nn::GraphContext ctx(true);
  const int n = static_cast<int>(batch.size());
  nn::Var x = nn::constant(batch_inputs(batch));
  nn::Var y = nn::constant(batch_doses_norm(batch));

  nn::Var l_cdpm_v, l_hfrm_v;
  std::vector<int> ts;

  auto loss_fn = [&](const nn::Var& pred, const nn::Var& target) {
    return cfg.hfrm_loss == NoiseLossKind::L1 ? nn::mean_abs_diff(pred, target)
                                              : nn::mean_sq_diff(pred, target);
  };
  auto draw_ts = [&]() {
    ts.resize(static_cast<std::size_t>(n));
    for (int& t : ts) t = static_cast<int>(rng.uniform_int(1, models.schedule.steps));
  };

  switch (models.mode) {
    case PipelineMode::CoarseOnly: {
      auto cd = cdpm_forward(*models.cdpm, ctx, x);
      l_cdpm_v = nn::mean_abs_diff(cd.coarse, y);
      break;
    }
    case PipelineMode::DiffusionDirect: {
      draw_ts();
      nn::Tensor eps = random_normal_tensor(y.shape(), rng);
      nn::Tensor x_t = q_sample_batch(y.value(), ts, eps, models.schedule);
      ConditioningBundle bundle = make_image_conditioning(x);
      nn::Var eps_pred = hfrm_denoise(*models.denoiser, ctx, bundle, nn::constant(std::move(x_t)), ts);
      l_hfrm_v = loss_fn(eps_pred, nn::constant(std::move(eps)));
      break;
    }
    case PipelineMode::CoarseCnnRefine:
    case PipelineMode::Full: {
      auto cd = cdpm_forward(*models.cdpm, ctx, x);
      l_cdpm_v = nn::mean_abs_diff(cd.coarse, y);
      nn::Var coarse_high = nn::slice_channels(nn::haar_dwt2(cd.coarse), 1, 4);
      nn::Var x_down = nn::avg_pool2(x);
      nn::Var y_high = nn::slice_channels(nn::haar_dwt2(y), 1, 4);

      if (models.mode == PipelineMode::CoarseCnnRefine) {
        nn::Var in = nn::concat_channels(cfg.end_to_end ? coarse_high : nn::detach(coarse_high), x_down);
        nn::Var refined = models.refiner->forward(ctx, in).out;
        l_hfrm_v = nn::mean_abs_diff(refined, y_high);
      } else {
        ConditioningBundle bundle =
            make_conditioning(coarse_high, x_down, cd.encoder_features, !cfg.end_to_end);
        draw_ts();
        nn::Tensor eps = random_normal_tensor(y_high.shape(), rng);
        nn::Tensor x_t = q_sample_batch(y_high.value(), ts, eps, models.schedule);
        nn::Var eps_pred = hfrm_denoise(*models.denoiser, ctx, bundle, nn::constant(std::move(x_t)), ts);
        l_hfrm_v = loss_fn(eps_pred, nn::constant(std::move(eps)));
      }
      break;
    }
  }

  LossReport report;
  report.l_cdpm = l_cdpm_v.defined() ? l_cdpm_v.value()[0] : 0.0;
  report.l_hfrm = l_hfrm_v.defined() ? l_hfrm_v.value()[0] : 0.0;
  report.l_total = report.l_cdpm + report.l_hfrm;

  if (!std::isfinite(report.l_total)) {
    std::string dump = "non-finite loss at step " + std::to_string(models.step + 1) + " (mode " +
                       mode_to_string(models.mode) + "): l_cdpm=" + std::to_string(report.l_cdpm) +
                       " l_hfrm=" + std::to_string(report.l_hfrm) + "; batch=[";
    for (const auto* s : batch) dump += s->id + " ";
    dump += "]; t=[";
    for (int t : ts) dump += std::to_string(t) + " ";
    dump += "]; max|param|: cdpm=" + std::to_string(max_abs_param(models.cdpm.get())) +
            " denoiser=" + std::to_string(max_abs_param(models.denoiser.get())) +
            " refiner=" + std::to_string(max_abs_param(models.refiner.get()));
    throw NumericError(dump);
  }

  nn::Var total;
  if (l_cdpm_v.defined() && l_hfrm_v.defined())
    total = nn::axpby(l_cdpm_v, l_hfrm_v, TrainConfig::kLossWeightCdpm, TrainConfig::kLossWeightHfrm);
  else
    total = l_cdpm_v.defined() ? l_cdpm_v : l_hfrm_v;

  nn::backward(total);
  optimizer.step(ctx, models.trainable_parameters());
  models.step += 1;
  report.step = models.step;
  return report;
}

void train_loop(ModelSet& models, nn::Adam& optimizer, const std::vector<PlanningSample>& train_set,
                const TrainConfig& cfg, std::int64_t target_step, const std::string& checkpoint_path,
                const std::string& csv_path, const std::function<void(const LossReport&)>& on_step) {
  if (train_set.empty()) throw ParameterError("empty training set");
  const std::size_t n = train_set.size();

  std::ofstream csv;
  if (!csv_path.empty()) {
    const bool fresh = !std::ifstream(csv_path).good();
    csv.open(csv_path, std::ios::app);
    if (!csv) throw IoError("cannot open loss log " + csv_path);
    if (fresh) csv << "step,epoch,l_cdpm,l_hfrm,l_total\n";
  }

  auto save = [&]() {
    if (checkpoint_path.empty()) return;
    Checkpoint ckpt = models.to_checkpoint(&optimizer);
    save_checkpoint(checkpoint_path, ckpt);
  };

  while (models.step < target_step) {
    // Step contents are a pure function of (seed, step index): resumable.
    SeededRng step_rng(mix_seed(cfg.seed, 0x53544550ull + static_cast<std::uint64_t>(models.step)));
    std::vector<const PlanningSample*> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(&train_set[step_rng.uniform_index(n)]);

    LossReport report = train_step(models, optimizer, batch, step_rng, cfg);
    report.epoch = static_cast<int>(static_cast<std::size_t>(report.step) * cfg.batch_size / n);
    if (csv.is_open()) {
      csv.precision(10);
      csv << report.step << ',' << report.epoch << ',' << report.l_cdpm << ',' << report.l_hfrm << ','
          << report.l_total << '\n';
      csv.flush();
    }
    if (models.step % cfg.checkpoint_every == 0 || models.step == target_step) save();
    if (on_step) on_step(report);
  }
}

// ---- inference ----------------------------------------------------------------

Prediction predict(ModelSet& models, const PlanningSample& sample, int stride, std::uint64_t noise_seed) {
  nn::GraphContext ctx(false);
  const int h = sample.ct.height, w = sample.ct.width;
  nn::Var x = nn::constant(batch_inputs({&sample}));
  SeededRng rng(noise_seed);
  Prediction out;

  auto finish = [&](const Grid2D& recon_norm) {
    out.recon_norm = recon_norm;
    out.dose_gy = Grid2D(h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        out.dose_gy.at(r, c) = std::max(0.0, denormalize_dose(recon_norm.at(r, c), sample.prescription));
  };

  switch (models.mode) {
    case PipelineMode::CoarseOnly: {
      auto cd = cdpm_forward(*models.cdpm, ctx, x);
      out.coarse_norm = grid_from_channel(cd.coarse.value(), 0, 0);
      finish(out.coarse_norm);
      break;
    }
    case PipelineMode::DiffusionDirect: {
      ConditioningBundle bundle = make_image_conditioning(x);
      DenoiserFn fn = [&](const ChannelStack& x_t, int t) {
        nn::Var pred = hfrm_denoise(*models.denoiser, ctx, bundle, nn::constant(stack_to_tensor(x_t)), {t});
        return tensor_to_stack(pred.value());
      };
      ChannelStack x0 = sample_loop(fn, 1, h, w, models.schedule, rng, stride);
      Grid2D recon(h, w);
      std::copy(x0.values.begin(), x0.values.end(), recon.values.begin());
      finish(recon);
      break;
    }
    case PipelineMode::CoarseCnnRefine:
    case PipelineMode::Full: {
      auto cd = cdpm_forward(*models.cdpm, ctx, x);
      out.coarse_norm = grid_from_channel(cd.coarse.value(), 0, 0);
      nn::Var bands = nn::haar_dwt2(cd.coarse);
      nn::Var coarse_high = nn::slice_channels(bands, 1, 4);
      nn::Var x_down = nn::avg_pool2(x);

      nn::Tensor high;
      if (models.mode == PipelineMode::CoarseCnnRefine) {
        nn::Var refined = models.refiner->forward(ctx, nn::concat_channels(coarse_high, x_down)).out;
        high = refined.value();
      } else {
        ConditioningBundle bundle = make_conditioning(coarse_high, x_down, cd.encoder_features, false);
        DenoiserFn fn = [&](const ChannelStack& x_t, int t) {
          nn::Var pred = hfrm_denoise(*models.denoiser, ctx, bundle, nn::constant(stack_to_tensor(x_t)), {t});
          return tensor_to_stack(pred.value());
        };
        ChannelStack sampled = sample_loop(fn, 3, h / 2, w / 2, models.schedule, rng, stride);
        high = stack_to_tensor(sampled);
      }

      // Recombination keeps the coarse low band untouched (the high bands are
      // the only refined part), then inverts the transform.
      SubbandSet set{grid_from_channel(bands.value(), 0, 0), grid_from_channel(high, 0, 0),
                     grid_from_channel(high, 0, 1), grid_from_channel(high, 0, 2)};
      finish(iwt2(set));
      break;
    }
  }
  return out;
}

double coarse_l1(ModelSet& models, const std::vector<PlanningSample>& samples) {
  if (models.cdpm == nullptr) throw ContractError("model set has no coarse network");
  if (samples.empty()) throw ParameterError("empty sample set");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : samples) {
    nn::GraphContext ctx(false);
    nn::Var x = nn::constant(batch_inputs({&s}));
    auto cd = cdpm_forward(*models.cdpm, ctx, x);
    const nn::Tensor& pred = cd.coarse.value();
    for (int r = 0; r < s.dose.height; ++r)
      for (int c = 0; c < s.dose.width; ++c) {
        total += std::abs(pred.at(0, 0, r, c) - normalize_dose(s.dose.at(r, c), s.prescription));
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

double high_band_energy_ratio(const std::vector<Grid2D>& pred, const std::vector<Grid2D>& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ParameterError("need matched non-empty dose lists");
  double num = 0.0, den = 0.0;
  auto high_energy = [](const Grid2D& g) {
    SubbandSet s = dwt2(g);
    return squared_norm(s.lh) + squared_norm(s.hl) + squared_norm(s.hh);
  };
  for (std::size_t i = 0; i < pred.size(); ++i) {
    num += high_energy(pred[i]);
    den += high_energy(truth[i]);
  }
  if (den <= 0.0) throw NumericError("ground truth has no high-band energy");
  return std::sqrt(num / den);
}

// ---- benchmark ----------------------------------------------------------------

BenchReport benchmark_step_cost(const NetworkConfig& base, int height, int width, int trials,
                                std::uint64_t seed, int projected_steps) {
  if (trials < 1) throw ParameterError("need at least one trial");
  if (height % 32 != 0 || width % 32 != 0)
    throw ParameterError("benchmark size must be divisible by 32 (half resolution spans 5 levels)");

  SeededRng rng(mix_seed(seed, 0x42454E43ull));

  NetworkConfig image_cfg = base;
  image_cfg.in_channels = 1 + kPlanningChannels;
  image_cfg.out_channels = 1;
  auto image_net = build_hfrm("hfrm", image_cfg, nullptr, rng);

  NetworkConfig cdpm_cfg = base;
  cdpm_cfg.in_channels = kPlanningChannels;
  cdpm_cfg.out_channels = 1;
  auto cdpm = build_cdpm("cdpm", cdpm_cfg, rng);
  NetworkConfig wavelet_cfg = base;
  wavelet_cfg.in_channels = 3 + 3 + kPlanningChannels;
  wavelet_cfg.out_channels = 3;
  auto wavelet_net = build_hfrm("hfrm", wavelet_cfg, &cdpm_cfg, rng);

  nn::GraphContext ctx(false);
  nn::Var x = nn::constant(random_normal_tensor({1, kPlanningChannels, height, width}, rng));
  ConditioningBundle image_bundle = make_image_conditioning(x);

  // Conditioning features are fixed for a whole sampling run, so the coarse
  // forward is excluded from per-step cost.
  auto cd = cdpm_forward(*cdpm, ctx, x);
  nn::Var coarse_high = nn::slice_channels(nn::haar_dwt2(cd.coarse), 1, 4);
  ConditioningBundle wavelet_bundle =
      make_conditioning(coarse_high, nn::avg_pool2(x), cd.encoder_features, false);

  nn::Tensor image_state = random_normal_tensor({1, 1, height, width}, rng);
  nn::Tensor wavelet_state = random_normal_tensor({1, 3, height / 2, width / 2}, rng);

  auto time_forward = [&](nn::UNet& net, const ConditioningBundle& bundle, const nn::Tensor& state) {
    std::vector<double> ms(static_cast<std::size_t>(trials));
    for (int i = 0; i < trials; ++i) {
      const auto start = std::chrono::steady_clock::now();
      nn::Var pred = hfrm_denoise(net, ctx, bundle, nn::constant(state.clone()), {1 + i % 7});
      const auto stop = std::chrono::steady_clock::now();
      // Touch the output so the work cannot be elided.
      volatile double sink = pred.value()[0];
      (void)sink;
      ms[static_cast<std::size_t>(i)] = std::chrono::duration<double, std::milli>(stop - start).count();
    }
    std::sort(ms.begin(), ms.end());
    return ms[ms.size() / 2];
  };

  BenchReport r;
  r.height = height;
  r.width = width;
  r.trials = trials;
  r.image_elems = height * width;
  r.wavelet_elems = (height / 2) * (width / 2);
  r.image_median_ms = time_forward(*image_net, image_bundle, image_state);
  r.wavelet_median_ms = time_forward(*wavelet_net, wavelet_bundle, wavelet_state);
  r.speedup = r.image_median_ms / r.wavelet_median_ms;
  r.projected_steps = projected_steps;
  r.image_total_s = r.image_median_ms * projected_steps / 1000.0;
  r.wavelet_total_s = r.wavelet_median_ms * projected_steps / 1000.0;
  return r;
}

}  // namespace fddm
