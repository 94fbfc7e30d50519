#include <cmath>
#include <cstring>
#include <functional>
#include <set>
#include <vector>

#include "doctest.h"
#include "fddm/networks.hpp"
#include "fddm/nn/adam.hpp"
#include "fddm/pipeline.hpp"

using namespace fddm;
using nn::GraphContext;
using nn::Tensor;
using nn::Var;

namespace {

NetworkConfig micro_config() {
  NetworkConfig cfg;
  cfg.levels = 2;
  cfg.base_channels = 4;
  cfg.channel_multipliers = {1, 2};
  cfg.groupnorm_groups = 2;
  cfg.attention_heads = 1;
  return cfg;
}

Tensor random_input(int n, int c, int h, int w, SeededRng& rng) {
  Tensor t(nn::Shape{n, c, h, w});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
  return t;
}

// ---- closed-form parameter arithmetic, written independently of the layer
// classes: conv = weights + bias, groupnorm = gamma + beta, and so on.
std::int64_t conv_params(int cin, int cout, int k) { return static_cast<std::int64_t>(cout) * cin * k * k + cout; }
std::int64_t gn_params(int c) { return 2 * static_cast<std::int64_t>(c); }
std::int64_t linear_params(int fin, int fout) { return static_cast<std::int64_t>(fout) * fin + fout; }
std::int64_t convblock_params(int cin, int cout) { return conv_params(cin, cout, 3) + gn_params(cout); }
std::int64_t resblock_params(int cin, int cout, int temb) {
  std::int64_t n = convblock_params(cin, cout) + convblock_params(cout, cout);
  if (cin != cout) n += conv_params(cin, cout, 1);
  if (temb > 0) n += linear_params(temb, cout);
  return n;
}
std::int64_t self_attention_params(int c) { return gn_params(c) + 4 * conv_params(c, c, 1); }
std::int64_t cross_attention_params(int c, int cc) {
  return gn_params(c) + conv_params(c, c, 1) + 2 * conv_params(cc, c, 1) + conv_params(c, c, 1);
}

std::int64_t expected_unet_params(const nn::UNetConfig& cfg) {
  const int L = cfg.levels;
  const int temb = cfg.time_conditioned ? cfg.temb_dim() : 0;
  std::int64_t n = 0;
  if (cfg.time_conditioned) n += 2 * linear_params(cfg.temb_dim(), cfg.temb_dim());
  int ch = cfg.in_channels;
  for (int i = 0; i < L; ++i) {
    const int out = cfg.channels_at(i);
    n += resblock_params(ch, out, temb);
    if (!cfg.cond_channels.empty()) {
      const int cc = cfg.cond_channels[static_cast<std::size_t>(i)];
      n += i < cfg.cond_add_levels ? conv_params(cc, out, 1) : cross_attention_params(out, cc);
    }
    if (i < L - 1) n += conv_params(out, out, 3);  // stride-2 downsampler
    ch = out;
  }
  n += resblock_params(ch, ch, temb) + self_attention_params(ch) + resblock_params(ch, ch, temb);
  for (int j = 0; j < L; ++j) {
    if (j < L - 1) {
      const int target = cfg.channels_at(L - 2 - j);
      n += conv_params(ch, ch, 1);                         // post-upsample projection
      n += resblock_params(ch + target, target, temb);     // consumes the skip concat
      n += resblock_params(target, target, temb);
      ch = target;
    } else {
      n += 2 * resblock_params(ch, ch, temb);
    }
  }
  n += conv_params(ch, cfg.out_channels, 3);  // head
  return n;
}

// Central finite differences on sampled parameter entries. Uses the exact
// float-rounded step so f32 quantization cannot pollute the estimate.
struct FdStats {
  int checked = 0, failed = 0;
  double worst = 0.0;
};

FdStats fd_check_params(const std::vector<nn::Parameter*>& params,
                        const std::function<double(GraphContext&)>& loss_graph, SeededRng& pick,
                        int per_tensor, double h = 1e-3, double tol = 1e-3) {
  GraphContext gctx(true);
  loss_graph(gctx);  // populates gradients via the caller's backward call
  FdStats st;
  for (nn::Parameter* p : params) {
    const std::vector<double>* g = gctx.grad_of(*p);
    for (int s = 0; s < per_tensor; ++s) {
      const std::size_t idx = pick.uniform_index(p->value.size());
      const float keep = p->value[idx];
      const float plus = static_cast<float>(static_cast<double>(keep) + h);
      const float minus = static_cast<float>(static_cast<double>(keep) - h);
      const double actual_step = static_cast<double>(plus) - static_cast<double>(minus);

      p->value[idx] = plus;
      GraphContext cp(false);
      const double lp = loss_graph(cp);
      p->value[idx] = minus;
      GraphContext cm(false);
      const double lm = loss_graph(cm);
      p->value[idx] = keep;

      const double fd = (lp - lm) / actual_step;
      const double an = g == nullptr ? 0.0 : (*g)[idx];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      ++st.checked;
      st.worst = std::max(st.worst, rel);
      if (rel > tol) ++st.failed;
    }
  }
  return st;
}

}  // namespace

TEST_CASE("cdpm shape contract: 6-channel 64x64 in, 1-channel 64x64 out") {
  NetworkConfig cfg;
  cfg.levels = 5;
  cfg.base_channels = 8;
  cfg.channel_multipliers = {1, 2, 2, 4, 4};
  cfg.groupnorm_groups = 4;
  cfg.in_channels = kPlanningChannels;
  cfg.out_channels = 1;
  SeededRng rng(101);
  auto net = build_cdpm("cdpm", cfg, rng);

  GraphContext ctx(false);
  SeededRng data(102);
  Var x = nn::constant(random_input(1, 6, 64, 64, data));
  CdpmResult res = cdpm_forward(*net, ctx, x);
  CHECK(res.coarse.shape().c == 1);
  CHECK(res.coarse.shape().h == 64);
  CHECK(res.coarse.shape().w == 64);

  REQUIRE(res.encoder_features.size() == 5);
  const int want_h[5] = {64, 32, 16, 8, 4};
  const int want_c[5] = {8, 16, 16, 32, 32};
  for (int i = 0; i < 5; ++i) {
    CHECK(res.encoder_features[static_cast<std::size_t>(i)].shape().h == want_h[i]);
    CHECK(res.encoder_features[static_cast<std::size_t>(i)].shape().w == want_h[i]);
    CHECK(res.encoder_features[static_cast<std::size_t>(i)].shape().c == want_c[i]);
  }
}

TEST_CASE("parameter count matches the closed-form arithmetic oracle") {
  SeededRng rng(103);

  NetworkConfig micro = micro_config();
  micro.in_channels = 3;
  micro.out_channels = 1;
  auto tiny = build_cdpm("tiny", micro, rng);
  CHECK(tiny->parameter_count() == expected_unet_params(tiny->config()));

  NetworkConfig full;  // the default desk-scale geometry
  full.in_channels = kPlanningChannels;
  full.out_channels = 1;
  auto cdpm = build_cdpm("cdpm", full, rng);
  CHECK(cdpm->parameter_count() == expected_unet_params(cdpm->config()));

  NetworkConfig hf = micro_config();
  hf.in_channels = 12;
  hf.out_channels = 3;
  NetworkConfig cdpm_side = micro_config();
  cdpm_side.in_channels = kPlanningChannels;
  cdpm_side.out_channels = 1;
  auto hfrm = build_hfrm("hfrm", hf, &cdpm_side, rng);
  CHECK(hfrm->config().time_conditioned);
  CHECK_FALSE(hfrm->config().cond_channels.empty());
  CHECK(hfrm->parameter_count() == expected_unet_params(hfrm->config()));

  // Names key the optimizer state: they must be unique.
  std::set<std::string> names;
  for (nn::Parameter* p : hfrm->parameters()) CHECK(names.insert(p->name).second);
}

TEST_CASE("fixed seed gives identical builds and identical forwards") {
  NetworkConfig cfg = micro_config();
  cfg.in_channels = 3;
  cfg.out_channels = 1;
  SeededRng ra(104), rb(104);
  auto a = build_cdpm("net", cfg, ra);
  auto b = build_cdpm("net", cfg, rb);
  auto pa = a->parameters(), pb = b->parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value == pb[i]->value);
  }

  SeededRng data(105);
  Tensor x = random_input(2, 3, 8, 8, data);
  GraphContext c1(false), c2(false);
  Var y1 = cdpm_forward(*a, c1, nn::constant(x.clone())).coarse;
  Var y2 = cdpm_forward(*a, c2, nn::constant(x.clone())).coarse;
  for (std::size_t i = 0; i < y1.value().numel(); ++i) CHECK(y1.value()[i] == y2.value()[i]);
}

TEST_CASE("config validation rejects illegal geometries") {
  SeededRng rng(106);
  NetworkConfig cfg = micro_config();
  cfg.levels = 1;
  cfg.channel_multipliers = {1};
  CHECK_THROWS_AS(build_cdpm("x", cfg, rng), ParameterError);

  cfg = micro_config();
  cfg.channel_multipliers = {1, 2, 4};  // wrong length
  CHECK_THROWS_AS(build_cdpm("x", cfg, rng), ParameterError);

  cfg = micro_config();
  cfg.groupnorm_groups = 3;  // 4 % 3 != 0
  CHECK_THROWS_AS(build_cdpm("x", cfg, rng), ParameterError);

  cfg = micro_config();
  auto net = build_cdpm("x", cfg, rng);
  GraphContext ctx(false);
  SeededRng data(107);
  // 6x6 is not divisible by 2^(levels-1) = 2? It is; use 5x6 (odd) instead.
  CHECK_THROWS_AS(net->forward(ctx, nn::constant(random_input(1, 6, 5, 6, data))), DimensionError);
  CHECK_THROWS_AS(net->forward(ctx, nn::constant(random_input(1, 4, 8, 8, data))), DimensionError);
}

TEST_CASE("cdpm analytic gradients match central differences (micro config)") {
  NetworkConfig cfg = micro_config();
  cfg.in_channels = 3;
  cfg.out_channels = 1;
  SeededRng rng(108);
  auto net = build_cdpm("net", cfg, rng);

  SeededRng data(109);
  Tensor x = random_input(1, 3, 8, 8, data);
  Tensor y = random_input(1, 1, 8, 8, data);

  auto loss_graph = [&](GraphContext& ctx) {
    Var out = cdpm_forward(*net, ctx, nn::constant(x.clone())).coarse;
    Var loss = nn::mean_abs_diff(out, nn::constant(y.clone()));
    if (ctx.training()) nn::backward(loss);
    return loss.value()[0];
  };
  SeededRng pick(110);
  FdStats st = fd_check_params(net->parameters(), loss_graph, pick, 4);
  INFO("checked ", st.checked, " failed ", st.failed, " worst ", st.worst);
  CHECK(st.checked > 100);
  CHECK(st.failed * 100 <= st.checked);  // >= 99% within tolerance
}

TEST_CASE("hfrm denoiser: conditioned forward honors every shape contract") {
  SeededRng rng(111);
  NetworkConfig cdpm_cfg = micro_config();
  cdpm_cfg.in_channels = kPlanningChannels;
  cdpm_cfg.out_channels = 1;
  auto cdpm = build_cdpm("cdpm", cdpm_cfg, rng);

  NetworkConfig hf = micro_config();
  hf.in_channels = 3 + 3 + kPlanningChannels;
  hf.out_channels = 3;
  auto hfrm = build_hfrm("hfrm", hf, &cdpm_cfg, rng);

  GraphContext ctx(false);
  SeededRng data(112);
  Var x = nn::constant(random_input(1, kPlanningChannels, 16, 16, data));
  CdpmResult cd = cdpm_forward(*cdpm, ctx, x);
  Var coarse_high = nn::slice_channels(nn::haar_dwt2(cd.coarse), 1, 4);
  ConditioningBundle bundle = make_conditioning(coarse_high, nn::avg_pool2(x), cd.encoder_features, true);
  CHECK(bundle.image_cond.shape().c == 3 + kPlanningChannels);
  CHECK(bundle.image_cond.shape().h == 8);
  REQUIRE(bundle.feature_cond.size() == 2);
  CHECK(bundle.feature_cond[0].shape().h == 8);
  CHECK(bundle.feature_cond[1].shape().h == 4);

  Tensor x_t = random_input(1, 3, 8, 8, data);
  Var eps = hfrm_denoise(*hfrm, ctx, bundle, nn::constant(x_t.clone()), {17});
  CHECK(eps.shape().c == 3);
  CHECK(eps.shape().h == 8);
  CHECK(eps.shape().w == 8);

  SUBCASE("the timestep binds") {
    Var other = hfrm_denoise(*hfrm, ctx, bundle, nn::constant(x_t.clone()), {900});
    double diff = 0.0;
    for (std::size_t i = 0; i < eps.value().numel(); ++i)
      diff = std::max(diff, std::abs(eps.value()[i] - other.value()[i]));
    CHECK(diff > 1e-8);
  }

  SUBCASE("subband channels are not weight-tied") {
    Tensor perm(x_t.shape);
    const int hw = 8 * 8;
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < hw; ++i) perm[static_cast<std::size_t>(c) * hw + i] = x_t[((c + 1) % 3) * hw + i];
    Var swapped = hfrm_denoise(*hfrm, ctx, bundle, nn::constant(std::move(perm)), {17});
    double diff = 0.0;
    for (std::size_t i = 0; i < eps.value().numel(); ++i)
      diff = std::max(diff, std::abs(eps.value()[i] - swapped.value()[i]));
    CHECK(diff > 1e-8);
  }

  SUBCASE("misaligned bundles are contract errors") {
    ConditioningBundle broken = bundle;
    broken.feature_cond.pop_back();
    CHECK_THROWS_AS(hfrm_denoise(*hfrm, ctx, broken, nn::constant(x_t.clone()), {17}), ContractError);
    ConditioningBundle wrong = bundle;
    wrong.image_cond = nn::constant(random_input(1, 9, 4, 4, data));
    CHECK_THROWS_AS(hfrm_denoise(*hfrm, ctx, wrong, nn::constant(x_t.clone()), {17}), ContractError);
    CHECK_THROWS_AS(hfrm_denoise(*hfrm, ctx, bundle, nn::constant(random_input(1, 3, 8, 8, data)),
                                 std::vector<int>{1, 2}),
                    ContractError);
  }
}

TEST_CASE("cross-attention weights are row-stochastic") {
  SeededRng rng(113);
  nn::CrossAttention ca("ca", 4, 6, 2, 2, rng);
  GraphContext ctx(false);
  SeededRng data(114);
  Var x = nn::constant(random_input(1, 4, 4, 4, data));
  Var cond = nn::constant(random_input(1, 6, 4, 4, data));
  Var probs = ca.probs(ctx, x, cond);
  const Tensor& p = probs.value();
  // Last dim indexes the keys; each (batch, head, query) row sums to 1.
  const int rows = p.shape.n * p.shape.c * p.shape.h;
  for (int r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int k = 0; k < p.shape.w; ++k) sum += p[static_cast<std::size_t>(r) * p.shape.w + k];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("gradients flow through conditioning into the coarse network") {
  SeededRng rng(115);
  NetworkConfig cdpm_cfg = micro_config();
  cdpm_cfg.in_channels = kPlanningChannels;
  cdpm_cfg.out_channels = 1;
  auto cdpm = build_cdpm("cdpm", cdpm_cfg, rng);
  NetworkConfig hf = micro_config();
  hf.in_channels = 3 + 3 + kPlanningChannels;
  hf.out_channels = 3;
  auto hfrm = build_hfrm("hfrm", hf, &cdpm_cfg, rng);

  SeededRng data(116);
  Tensor x = random_input(1, kPlanningChannels, 16, 16, data);
  Tensor x_t = random_input(1, 3, 8, 8, data);
  Tensor eps = random_input(1, 3, 8, 8, data);

  auto loss_graph = [&](GraphContext& ctx) {
    CdpmResult cd = cdpm_forward(*cdpm, ctx, nn::constant(x.clone()));
    Var coarse_high = nn::slice_channels(nn::haar_dwt2(cd.coarse), 1, 4);
    ConditioningBundle bundle =
        make_conditioning(coarse_high, nn::avg_pool2(nn::constant(x.clone())), cd.encoder_features, false);
    Var pred = hfrm_denoise(*hfrm, ctx, bundle, nn::constant(x_t.clone()), {5});
    Var loss = nn::mean_sq_diff(pred, nn::constant(eps.clone()));
    if (ctx.training()) nn::backward(loss);
    return loss.value()[0];
  };
  // End-to-end: the denoiser loss must reach the coarse network's weights.
  GraphContext probe(true);
  loss_graph(probe);
  int cdpm_touched = 0;
  for (nn::Parameter* p : cdpm->parameters()) cdpm_touched += probe.grad_of(*p) != nullptr;
  CHECK(cdpm_touched > 0);

  std::vector<nn::Parameter*> both = cdpm->parameters();
  auto hp = hfrm->parameters();
  both.insert(both.end(), hp.begin(), hp.end());
  SeededRng pick(117);
  FdStats st = fd_check_params(both, loss_graph, pick, 2);
  INFO("checked ", st.checked, " failed ", st.failed, " worst ", st.worst);
  CHECK(st.checked > 100);
  CHECK(st.failed * 100 <= st.checked);
}

TEST_CASE("overfit oracle: 500 steps memorize one (x0, t, eps) triple") {
  SeededRng rng(118);
  NetworkConfig cdpm_cfg = micro_config();
  cdpm_cfg.in_channels = kPlanningChannels;
  cdpm_cfg.out_channels = 1;
  auto cdpm = build_cdpm("cdpm", cdpm_cfg, rng);
  NetworkConfig hf = micro_config();
  hf.in_channels = 3 + 3 + kPlanningChannels;
  hf.out_channels = 3;
  auto hfrm = build_hfrm("hfrm", hf, &cdpm_cfg, rng);

  SeededRng data(119);
  Tensor x = random_input(1, kPlanningChannels, 16, 16, data);
  Tensor x_t = random_input(1, 3, 8, 8, data);
  Tensor eps = random_input(1, 3, 8, 8, data);

  // The conditioning is fixed (frozen coarse network, fixed input), so the
  // bundle can be built once outside the training loop.
  GraphContext cond_ctx(false);
  CdpmResult cd = cdpm_forward(*cdpm, cond_ctx, nn::constant(x.clone()));
  Var coarse_high = nn::slice_channels(nn::haar_dwt2(cd.coarse), 1, 4);
  ConditioningBundle bundle =
      make_conditioning(coarse_high, nn::avg_pool2(nn::constant(x.clone())), cd.encoder_features, true);

  nn::Adam opt(1e-2);
  auto params = hfrm->parameters();
  double loss_val = 1e9;
  for (int step = 0; step < 500; ++step) {
    GraphContext ctx(true);
    Var pred = hfrm_denoise(*hfrm, ctx, bundle, nn::constant(x_t.clone()), {7});
    Var loss = nn::mean_abs_diff(pred, nn::constant(eps.clone()));
    nn::backward(loss);
    opt.step(ctx, params);
    loss_val = loss.value()[0];
  }
  INFO("final overfit loss ", loss_val);
  CHECK(loss_val < 0.05);

  // Conditioning binds: a zeroed bundle must change the trained output.
  GraphContext ctx(false);
  Var with_cond = hfrm_denoise(*hfrm, ctx, bundle, nn::constant(x_t.clone()), {7});
  ConditioningBundle zero = bundle;
  zero.image_cond = nn::constant(Tensor(bundle.image_cond.shape()));
  for (auto& f : zero.feature_cond) f = nn::constant(Tensor(f.shape()));
  Var without = hfrm_denoise(*hfrm, ctx, zero, nn::constant(x_t.clone()), {7});
  double diff = 0.0;
  for (std::size_t i = 0; i < with_cond.value().numel(); ++i)
    diff = std::max(diff, std::abs(with_cond.value()[i] - without.value()[i]));
  CHECK(diff > 1e-6);
}
