#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fddm/nn/tensor.hpp"

namespace fddm::nn {

// One vertex of the dynamically built computation graph. Values are computed
// eagerly; gradients flow backwards through the recorded closures.
struct Node {
  Tensor value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool grad_touched = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.numel(), 0.0);
    grad_touched = true;
  }
};

// Cheap handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Tensor& value() const { return node_->value; }
  [[nodiscard]] Shape shape() const { return node_->value.shape; }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] Node* node() const { return node_.get(); }
  [[nodiscard]] std::shared_ptr<Node> shared() const { return node_; }

  // Gradient buffer after backward(); empty if this node was never reached.
  [[nodiscard]] const std::vector<double>& grad() const { return node_->grad; }
  [[nodiscard]] bool grad_touched() const { return node_->grad_touched; }

 private:
  std::shared_ptr<Node> node_;
};

// Leaf from an existing tensor. Gradients are tracked only when requested.
Var make_var(Tensor value, bool requires_grad = false);
Var constant(Tensor value);

// Reverse pass from a scalar loss. Gradients accumulate into every reachable
// node with requires_grad; leaves keep them until the graph is dropped.
void backward(const Var& loss);

// ---- primitive ops ---------------------------------------------------------

// alpha * a + beta * b, identical shapes.
Var axpby(const Var& a, const Var& b, double alpha = 1.0, double beta = 1.0);
inline Var add(const Var& a, const Var& b) { return axpby(a, b, 1.0, 1.0); }
inline Var sub(const Var& a, const Var& b) { return axpby(a, b, 1.0, -1.0); }
Var scale(const Var& a, double s);

// x + bias where bias is (1,c,1,1) (shared over batch) or (n,c,1,1)
// (per-sample, e.g. projected time embeddings).
Var add_channel_bias(const Var& x, const Var& bias);

Var silu(const Var& x);

Var concat_channels(const std::vector<Var>& xs);
inline Var concat_channels(const Var& a, const Var& b) { return concat_channels(std::vector<Var>{a, b}); }
Var slice_channels(const Var& x, int c_begin, int c_end);

// 2D convolution, kernel 1 or 3, stride 1 or 2; kernel-3 convs use padding 1
// so stride 1 preserves the spatial size and stride 2 halves even sizes.
// w: (cout, cin, k, k); optional b: (1, cout, 1, 1).
Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1);

// y = x W^T + b on (n, f) tensors stored as (n, f, 1, 1); W: (fout, fin, 1, 1).
Var linear(const Var& x, const Var& w, const Var& b);

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);

Var nearest_upsample2(const Var& x);
Var avg_pool2(const Var& x);

// Single-level orthonormal Haar analysis on every channel:
// (n, c, h, w) -> (n, 4c, h/2, w/2), band order (ll, lh, hl, hh) per channel.
Var haar_dwt2(const Var& x);

// Attention primitives. q, k, v are channel-major feature maps; tokens are
// spatial positions. scores[n,m,p,r] = <q_head(p), k_head(r)> / sqrt(c/m).
Var attn_scores(const Var& q, const Var& k, int heads);
Var softmax_lastdim(const Var& scores);
Var attn_mix(const Var& probs, const Var& v, int heads, int out_h, int out_w);

// Scalar-valued reductions (shape (1,1,1,1)).
Var mean_abs_diff(const Var& a, const Var& b);
Var mean_sq_diff(const Var& a, const Var& b);

// Cuts the gradient path; shares the value buffer.
Var detach(const Var& x);

}  // namespace fddm::nn
