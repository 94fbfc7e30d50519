#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fddm/nn/autodiff.hpp"
#include "fddm/rng.hpp"

namespace fddm::nn {

// Trainable weights. The float master copy is the persisted representation;
// all graph arithmetic runs in double.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<float> value;

  [[nodiscard]] std::size_t numel() const { return shape.numel(); }

  Parameter(std::string n, Shape s) : name(std::move(n)), shape(s), value(s.numel(), 0.0f) {}

  void fill_normal(SeededRng& rng, double stddev) {
    for (float& v : value) v = static_cast<float>(rng.normal() * stddev);
  }
  void fill(float x) { std::fill(value.begin(), value.end(), x); }
};

// Per-forward state: caches one leaf Var per Parameter so weights used on
// several paths (e.g. shared CDPM features feeding two losses) accumulate
// every contribution into a single gradient buffer.
class GraphContext {
 public:
  explicit GraphContext(bool training = true) : training_(training) {}

  [[nodiscard]] bool training() const { return training_; }

  Var leaf(Parameter& p) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    Tensor t(p.shape);
    for (std::size_t i = 0; i < p.numel(); ++i) t[i] = static_cast<double>(p.value[i]);
    Var v = make_var(std::move(t), training_);
    cache_.emplace(&p, v);
    return v;
  }

  // Gradient accumulated this step, or nullptr if the parameter never
  // received one (detached path or unused network).
  [[nodiscard]] const std::vector<double>* grad_of(Parameter& p) const {
    auto it = cache_.find(&p);
    if (it == cache_.end() || !it->second.grad_touched()) return nullptr;
    return &it->second.grad();
  }

 private:
  bool training_;
  std::unordered_map<Parameter*, Var> cache_;
};

// ---- layers ------------------------------------------------------------------

struct Conv2dLayer {
  Parameter w, b;
  int stride;

  Conv2dLayer(const std::string& name, int cin, int cout, int k, int stride_, SeededRng& rng)
      : w(name + ".w", Shape{cout, cin, k, k}), b(name + ".b", Shape{1, cout, 1, 1}), stride(stride_) {
    w.fill_normal(rng, std::sqrt(2.0 / (static_cast<double>(cin) * k * k)));
  }

  Var forward(GraphContext& ctx, const Var& x) const {
    auto& self = const_cast<Conv2dLayer&>(*this);
    return conv2d(x, ctx.leaf(self.w), ctx.leaf(self.b), stride);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct LinearLayer {
  Parameter w, b;

  LinearLayer(const std::string& name, int fin, int fout, SeededRng& rng)
      : w(name + ".w", Shape{fout, fin, 1, 1}), b(name + ".b", Shape{1, fout, 1, 1}) {
    w.fill_normal(rng, std::sqrt(2.0 / static_cast<double>(fin)));
  }

  Var forward(GraphContext& ctx, const Var& x) const {
    auto& self = const_cast<LinearLayer&>(*this);
    return linear(x, ctx.leaf(self.w), ctx.leaf(self.b));
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct GroupNormLayer {
  Parameter gamma, beta;
  int groups;

  GroupNormLayer(const std::string& name, int channels, int groups_)
      : gamma(name + ".gamma", Shape{1, channels, 1, 1}), beta(name + ".beta", Shape{1, channels, 1, 1}),
        groups(groups_) {
    gamma.fill(1.0f);
  }

  Var forward(GraphContext& ctx, const Var& x) const {
    auto& self = const_cast<GroupNormLayer&>(*this);
    return group_norm(x, ctx.leaf(self.gamma), ctx.leaf(self.beta), groups);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

// Conv -> GroupNorm -> Swish.
struct ConvBlock {
  Conv2dLayer conv;
  GroupNormLayer norm;

  ConvBlock(const std::string& name, int cin, int cout, int groups, SeededRng& rng)
      : conv(name + ".conv", cin, cout, 3, 1, rng), norm(name + ".norm", cout, groups) {}

  Var forward(GraphContext& ctx, const Var& x) const { return silu(norm.forward(ctx, conv.forward(ctx, x))); }

  void collect(std::vector<Parameter*>& out) {
    conv.collect(out);
    norm.collect(out);
  }
};

// Two ConvBlocks with a residual connection; 1x1 shortcut when the channel
// count changes. Time-conditioned variants add a projected embedding as a
// per-channel bias between the blocks.
struct ResBlock {
  ConvBlock cb1, cb2;
  std::optional<Conv2dLayer> shortcut;
  std::optional<LinearLayer> temb_proj;

  ResBlock(const std::string& name, int cin, int cout, int groups, int temb_dim, SeededRng& rng)
      : cb1(name + ".cb1", cin, cout, groups, rng), cb2(name + ".cb2", cout, cout, groups, rng) {
    if (cin != cout) shortcut.emplace(name + ".shortcut", cin, cout, 1, 1, rng);
    if (temb_dim > 0) temb_proj.emplace(name + ".temb", temb_dim, cout, rng);
  }

  Var forward(GraphContext& ctx, const Var& x, const Var& temb = Var()) const {
    Var h = cb1.forward(ctx, x);
    if (temb_proj) {
      if (!temb.defined()) throw ContractError("time-conditioned ResBlock called without embedding");
      h = add_channel_bias(h, temb_proj->forward(ctx, temb));
    }
    h = cb2.forward(ctx, h);
    Var skip = shortcut ? shortcut->forward(ctx, x) : x;
    return add(h, skip);
  }

  void collect(std::vector<Parameter*>& out) {
    cb1.collect(out);
    if (temb_proj) temb_proj->collect(out);
    cb2.collect(out);
    if (shortcut) shortcut->collect(out);
  }
};

// Pre-normalized self-attention over spatial positions with a residual add.
struct SelfAttention {
  GroupNormLayer norm;
  Conv2dLayer q, k, v, proj;
  int heads;

  SelfAttention(const std::string& name, int channels, int groups, int heads_, SeededRng& rng)
      : norm(name + ".norm", channels, groups), q(name + ".q", channels, channels, 1, 1, rng),
        k(name + ".k", channels, channels, 1, 1, rng), v(name + ".v", channels, channels, 1, 1, rng),
        proj(name + ".proj", channels, channels, 1, 1, rng), heads(heads_) {}

  Var forward(GraphContext& ctx, const Var& x) const {
    Var h = norm.forward(ctx, x);
    Var probs = softmax_lastdim(attn_scores(q.forward(ctx, h), k.forward(ctx, h), heads));
    Var mixed = attn_mix(probs, v.forward(ctx, h), heads, x.shape().h, x.shape().w);
    return add(proj.forward(ctx, mixed), x);
  }

  // Attention weights, exposed for tests.
  Var probs(GraphContext& ctx, const Var& x) const {
    Var h = norm.forward(ctx, x);
    return softmax_lastdim(attn_scores(q.forward(ctx, h), k.forward(ctx, h), heads));
  }

  void collect(std::vector<Parameter*>& out) {
    norm.collect(out);
    q.collect(out);
    k.collect(out);
    v.collect(out);
    proj.collect(out);
  }
};

// Cross-attention: queries from the denoiser feature map, keys/values from a
// projected conditioning feature map of the same spatial size.
struct CrossAttention {
  GroupNormLayer norm;
  Conv2dLayer q, k, v, proj;
  int heads;

  CrossAttention(const std::string& name, int channels, int cond_channels, int groups, int heads_, SeededRng& rng)
      : norm(name + ".norm", channels, groups), q(name + ".q", channels, channels, 1, 1, rng),
        k(name + ".k", cond_channels, channels, 1, 1, rng), v(name + ".v", cond_channels, channels, 1, 1, rng),
        proj(name + ".proj", channels, channels, 1, 1, rng), heads(heads_) {}

  Var forward(GraphContext& ctx, const Var& x, const Var& cond) const {
    Var h = norm.forward(ctx, x);
    Var probs = softmax_lastdim(attn_scores(q.forward(ctx, h), k.forward(ctx, cond), heads));
    Var mixed = attn_mix(probs, v.forward(ctx, cond), heads, x.shape().h, x.shape().w);
    return add(proj.forward(ctx, mixed), x);
  }

  Var probs(GraphContext& ctx, const Var& x, const Var& cond) const {
    Var h = norm.forward(ctx, x);
    return softmax_lastdim(attn_scores(q.forward(ctx, h), k.forward(ctx, cond), heads));
  }

  void collect(std::vector<Parameter*>& out) {
    norm.collect(out);
    q.collect(out);
    k.collect(out);
    v.collect(out);
    proj.collect(out);
  }
};

// Element-wise add of a 1x1-projected conditioning feature map.
struct AddCondition {
  Conv2dLayer proj;

  AddCondition(const std::string& name, int channels, int cond_channels, SeededRng& rng)
      : proj(name + ".proj", cond_channels, channels, 1, 1, rng) {}

  Var forward(GraphContext& ctx, const Var& x, const Var& cond) const { return add(x, proj.forward(ctx, cond)); }

  void collect(std::vector<Parameter*>& out) { proj.collect(out); }
};

// Sinusoidal embedding of integer steps, one row per batch element.
Tensor sinusoidal_embedding(const std::vector<int>& t, int dim);

}  // namespace fddm::nn
