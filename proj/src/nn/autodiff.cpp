#include "fddm/nn/autodiff.hpp"

#include <Eigen/Core>

#include <cmath>
#include <unordered_set>

namespace fddm::nn {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

std::shared_ptr<Node> fresh(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

// Registers the backward closure only when some input is on the tape.
Var finish(std::shared_ptr<Node> n, std::vector<Var> parents, std::function<void(Node&)> fn) {
  bool need = false;
  for (const Var& p : parents)
    if (p.defined() && p.requires_grad()) need = true;
  if (need) {
    n->requires_grad = true;
    for (const Var& p : parents)
      if (p.defined()) n->parents.push_back(p.shared());
    n->backward_fn = std::move(fn);
  }
  return Var(std::move(n));
}

void accumulate(Node& target, const double* g, std::size_t count) {
  target.ensure_grad();
  double* dst = target.grad.data();
  for (std::size_t i = 0; i < count; ++i) dst[i] += g[i];
}

}  // namespace

Var make_var(Tensor value, bool requires_grad) {
  auto n = fresh(std::move(value));
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

Var constant(Tensor value) { return make_var(std::move(value), false); }

void backward(const Var& loss) {
  if (!loss.defined() || loss.value().numel() != 1) throw ContractError("backward expects a defined scalar loss");

  // Iterative post-order DFS for the topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* parent = node->parents[idx++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad_touched) n->backward_fn(*n);
  }
}

// ---- elementwise -----------------------------------------------------------

Var axpby(const Var& a, const Var& b, double alpha, double beta) {
  if (!(a.shape() == b.shape())) throw DimensionError("axpby: shapes differ " + a.shape().str() + " vs " + b.shape().str());
  Tensor out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * a.value()[i] + beta * b.value()[i];
  auto an = a.shared(), bn = b.shared();
  return finish(fresh(std::move(out)), {a, b}, [an, bn, alpha, beta, n](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += alpha * self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) bn->grad[i] += beta * self.grad[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = s * a.value()[i];
  auto an = a.shared();
  return finish(fresh(std::move(out)), {a}, [an, s, n](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) an->grad[i] += s * self.grad[i];
  });
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const Shape xs = x.shape(), bs = bias.shape();
  if (bs.c != xs.c || bs.h != 1 || bs.w != 1 || (bs.n != 1 && bs.n != xs.n))
    throw DimensionError("add_channel_bias: bias " + bs.str() + " does not broadcast over " + xs.str());
  Tensor out(xs);
  const int hw = xs.h * xs.w;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const double bv = bias.value()[static_cast<std::size_t>(bs.n == 1 ? 0 : n) * bs.c + c];
      const std::size_t base = (static_cast<std::size_t>(n) * xs.c + c) * hw;
      for (int i = 0; i < hw; ++i) out[base + i] = x.value()[base + i] + bv;
    }
  auto xn = x.shared(), bn = bias.shared();
  return finish(fresh(std::move(out)), {x, bias}, [xn, bn, xs, bs, hw](Node& self) {
    if (xn->requires_grad) accumulate(*xn, self.grad.data(), self.value.numel());
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * xs.c + c) * hw;
          double s = 0.0;
          for (int i = 0; i < hw; ++i) s += self.grad[base + i];
          bn->grad[static_cast<std::size_t>(bs.n == 1 ? 0 : n) * bs.c + c] += s;
        }
    }
  });
}

Var silu(const Var& x) {
  Tensor out(x.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x.value()[i];
    out[i] = v / (1.0 + std::exp(-v));
  }
  auto xn = x.shared();
  return finish(fresh(std::move(out)), {x}, [xn, n](Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double v = xn->value[i];
      const double sig = 1.0 / (1.0 + std::exp(-v));
      xn->grad[i] += self.grad[i] * sig * (1.0 + v * (1.0 - sig));
    }
  });
}

// ---- channel plumbing ------------------------------------------------------

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  Shape s0 = xs.front().shape();
  int ctotal = 0;
  for (const Var& v : xs) {
    const Shape s = v.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      throw DimensionError("concat_channels: spatial/batch mismatch " + s.str() + " vs " + s0.str());
    ctotal += s.c;
  }
  Tensor out({s0.n, ctotal, s0.h, s0.w});
  const int hw = s0.h * s0.w;
  for (int n = 0; n < s0.n; ++n) {
    std::size_t dst = (static_cast<std::size_t>(n) * ctotal) * hw;
    for (const Var& v : xs) {
      const int cc = v.shape().c;
      const double* src = v.value().data() + static_cast<std::size_t>(n) * cc * hw;
      std::copy(src, src + static_cast<std::size_t>(cc) * hw, out.data() + dst);
      dst += static_cast<std::size_t>(cc) * hw;
    }
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const Var& v : xs) nodes.push_back(v.shared());
  return finish(fresh(std::move(out)), xs, [nodes, s0, ctotal, hw](Node& self) {
    for (int n = 0; n < s0.n; ++n) {
      std::size_t src = (static_cast<std::size_t>(n) * ctotal) * hw;
      for (const auto& pn : nodes) {
        const int cc = pn->value.shape.c;
        if (pn->requires_grad) {
          pn->ensure_grad();
          double* dst = pn->grad.data() + static_cast<std::size_t>(n) * cc * hw;
          const double* g = self.grad.data() + src;
          for (std::size_t i = 0; i < static_cast<std::size_t>(cc) * hw; ++i) dst[i] += g[i];
        }
        src += static_cast<std::size_t>(cc) * hw;
      }
    }
  });
}

Var slice_channels(const Var& x, int c_begin, int c_end) {
  const Shape s = x.shape();
  if (c_begin < 0 || c_end > s.c || c_begin >= c_end) throw DimensionError("slice_channels: bad range");
  const int cs = c_end - c_begin;
  Tensor out({s.n, cs, s.h, s.w});
  const int hw = s.h * s.w;
  for (int n = 0; n < s.n; ++n) {
    const double* src = x.value().data() + (static_cast<std::size_t>(n) * s.c + c_begin) * hw;
    std::copy(src, src + static_cast<std::size_t>(cs) * hw, out.data() + static_cast<std::size_t>(n) * cs * hw);
  }
  auto xn = x.shared();
  return finish(fresh(std::move(out)), {x}, [xn, s, c_begin, cs, hw](Node& self) {
    xn->ensure_grad();
    for (int n = 0; n < s.n; ++n) {
      double* dst = xn->grad.data() + (static_cast<std::size_t>(n) * s.c + c_begin) * hw;
      const double* g = self.grad.data() + static_cast<std::size_t>(n) * cs * hw;
      for (std::size_t i = 0; i < static_cast<std::size_t>(cs) * hw; ++i) dst[i] += g[i];
    }
  });
}

// ---- convolution -----------------------------------------------------------

namespace {

// Gathers receptive fields into (ho*wo) x (cin*k*k), one image at a time.
void im2col(const double* x, int cin, int h, int w, int k, int pad, int stride, int ho, int wo, double* col) {
  const int kk = k * k;
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      double* row = col + (static_cast<std::size_t>(oy) * wo + ox) * cin * kk;
      for (int c = 0; c < cin; ++c) {
        const double* plane = x + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride + ky - pad;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride + kx - pad;
            row[c * kk + ky * k + kx] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[static_cast<std::size_t>(iy) * w + ix] : 0.0;
          }
        }
      }
    }
  }
}

// Scatters column gradients back onto the padded input grid.
void col2im(const double* col, int cin, int h, int w, int k, int pad, int stride, int ho, int wo, double* gx) {
  const int kk = k * k;
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const double* row = col + (static_cast<std::size_t>(oy) * wo + ox) * cin * kk;
      for (int c = 0; c < cin; ++c) {
        double* plane = gx + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            plane[static_cast<std::size_t>(iy) * w + ix] += row[c * kk + ky * k + kx];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride) {
  const Shape xs = x.shape(), ws = w.shape();
  const int k = ws.h;
  if (k != ws.w || (k != 1 && k != 3)) throw DimensionError("conv2d supports square kernels of size 1 or 3");
  if (ws.c != xs.c) throw DimensionError("conv2d: weight expects " + std::to_string(ws.c) + " input channels, got " +
                                         std::to_string(xs.c));
  if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");
  const int pad = k == 3 ? 1 : 0;
  const int ho = (xs.h + 2 * pad - k) / stride + 1;
  const int wo = (xs.w + 2 * pad - k) / stride + 1;
  const int cout = ws.n, cin = xs.c, kk = k * k;
  if (b.defined() && (b.shape().c != cout || b.shape().numel() != static_cast<std::size_t>(cout)))
    throw DimensionError("conv2d: bias must be (1,cout,1,1)");

  Tensor out({xs.n, cout, ho, wo});
  const std::size_t cols = static_cast<std::size_t>(cin) * kk;
  std::vector<double> col(static_cast<std::size_t>(ho) * wo * cols);
  CMapRM wm(w.value().data(), cout, static_cast<Eigen::Index>(cols));
  for (int n = 0; n < xs.n; ++n) {
    im2col(x.value().data() + static_cast<std::size_t>(n) * cin * xs.h * xs.w, cin, xs.h, xs.w, k, pad, stride, ho, wo,
           col.data());
    CMapRM cm(col.data(), static_cast<Eigen::Index>(ho) * wo, static_cast<Eigen::Index>(cols));
    MapRM om(out.data() + static_cast<std::size_t>(n) * cout * ho * wo, cout, static_cast<Eigen::Index>(ho) * wo);
    om.noalias() = wm * cm.transpose();
    if (b.defined())
      for (int c = 0; c < cout; ++c) om.row(c).array() += b.value()[c];
  }

  auto xn = x.shared(), wn = w.shared();
  auto bn = b.defined() ? b.shared() : nullptr;
  std::vector<Var> parents = b.defined() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return finish(fresh(std::move(out)), parents, [=](Node& self) {
    const int h = xs.h, ww_ = xs.w;
    std::vector<double> colbuf(static_cast<std::size_t>(ho) * wo * cols);
    CMapRM wmat(wn->value.data(), cout, static_cast<Eigen::Index>(cols));
    if (wn->requires_grad) wn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    if (bn && bn->requires_grad) bn->ensure_grad();

    for (int n = 0; n < xs.n; ++n) {
      CMapRM go(self.grad.data() + static_cast<std::size_t>(n) * cout * ho * wo, cout,
                static_cast<Eigen::Index>(ho) * wo);
      if (wn->requires_grad) {
        im2col(xn->value.data() + static_cast<std::size_t>(n) * cin * h * ww_, cin, h, ww_, k, pad, stride, ho, wo,
               colbuf.data());
        CMapRM cm(colbuf.data(), static_cast<Eigen::Index>(ho) * wo, static_cast<Eigen::Index>(cols));
        MapRM gw(wn->grad.data(), cout, static_cast<Eigen::Index>(cols));
        gw.noalias() += go * cm;
      }
      if (xn->requires_grad) {
        MapRM gc(colbuf.data(), static_cast<Eigen::Index>(ho) * wo, static_cast<Eigen::Index>(cols));
        gc.noalias() = go.transpose() * wmat;
        col2im(colbuf.data(), cin, h, ww_, k, pad, stride, ho, wo,
               xn->grad.data() + static_cast<std::size_t>(n) * cin * h * ww_);
      }
      if (bn && bn->requires_grad) {
        // Plain sequential sums: Eigen's redux picks its vectorization split
        // from the buffer address, which makes the low bits of near-cancelling
        // sums vary from run to run and would break bit-exact replays.
        const double* gbase = self.grad.data() + static_cast<std::size_t>(n) * cout * ho * wo;
        const std::size_t row_len = static_cast<std::size_t>(ho) * wo;
        for (int c = 0; c < cout; ++c) {
          double acc = 0.0;
          const double* row = gbase + static_cast<std::size_t>(c) * row_len;
          for (std::size_t i = 0; i < row_len; ++i) acc += row[i];
          bn->grad[c] += acc;
        }
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Shape xs = x.shape(), ws = w.shape();
  if (xs.h != 1 || xs.w != 1 || ws.h != 1 || ws.w != 1 || ws.c != xs.c)
    throw DimensionError("linear: expects (n,f,1,1) x and (fout,fin,1,1) w with fin == f");
  const int n = xs.n, fin = xs.c, fout = ws.n;
  Tensor out({n, fout, 1, 1});
  CMapRM xm(x.value().data(), n, fin);
  CMapRM wm(w.value().data(), fout, fin);
  MapRM om(out.data(), n, fout);
  om.noalias() = xm * wm.transpose();
  if (b.defined()) {
    if (b.shape().c != fout || b.shape().numel() != static_cast<std::size_t>(fout))
      throw DimensionError("linear: bias must be (1,fout,1,1)");
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < fout; ++j) om(i, j) += b.value()[j];
  }
  auto xn = x.shared(), wn = w.shared();
  auto bn = b.defined() ? b.shared() : nullptr;
  std::vector<Var> parents = b.defined() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return finish(fresh(std::move(out)), parents, [=](Node& self) {
    CMapRM go(self.grad.data(), n, fout);
    if (xn->requires_grad) {
      xn->ensure_grad();
      MapRM gx(xn->grad.data(), n, fin);
      CMapRM wmat(wn->value.data(), fout, fin);
      gx.noalias() += go * wmat;
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      MapRM gw(wn->grad.data(), fout, fin);
      CMapRM xmat(xn->value.data(), n, fin);
      gw.noalias() += go.transpose() * xmat;
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < fout; ++j) bn->grad[j] += go(i, j);
    }
  });
}

// ---- normalization ---------------------------------------------------------

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  const Shape s = x.shape();
  if (groups < 1 || s.c % groups != 0)
    throw DimensionError("group_norm: " + std::to_string(s.c) + " channels not divisible by " +
                         std::to_string(groups) + " groups");
  if (gamma.shape().c != s.c || beta.shape().c != s.c) throw DimensionError("group_norm: affine params must be (1,c,1,1)");
  const int cpg = s.c / groups;
  const int hw = s.h * s.w;
  const std::size_t gsize = static_cast<std::size_t>(cpg) * hw;

  Tensor out(s);
  // Saved statistics for the backward pass.
  auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.n) * groups);
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.n) * groups);

  for (int n = 0; n < s.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + static_cast<std::size_t>(g) * cpg) * hw;
      double m = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) m += x.value()[base + i];
      m /= static_cast<double>(gsize);
      double v = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) {
        const double d = x.value()[base + i] - m;
        v += d * d;
      }
      v /= static_cast<double>(gsize);
      const double is = 1.0 / std::sqrt(v + eps);
      (*mean)[static_cast<std::size_t>(n) * groups + g] = m;
      (*invstd)[static_cast<std::size_t>(n) * groups + g] = is;
      for (int cc = 0; cc < cpg; ++cc) {
        const int c = g * cpg + cc;
        const double ga = gamma.value()[c], be = beta.value()[c];
        const std::size_t cbase = (static_cast<std::size_t>(n) * s.c + c) * hw;
        for (int i = 0; i < hw; ++i) out[cbase + i] = (x.value()[cbase + i] - m) * is * ga + be;
      }
    }
  }

  auto xn = x.shared(), gn = gamma.shared(), bn = beta.shared();
  return finish(fresh(std::move(out)), {x, gamma, beta}, [=](Node& self) {
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    for (int n = 0; n < s.n; ++n) {
      for (int g = 0; g < groups; ++g) {
        const double m = (*mean)[static_cast<std::size_t>(n) * groups + g];
        const double is = (*invstd)[static_cast<std::size_t>(n) * groups + g];
        const std::size_t gbase = (static_cast<std::size_t>(n) * s.c + static_cast<std::size_t>(g) * cpg) * hw;

        if (gn->requires_grad || bn->requires_grad) {
          for (int cc = 0; cc < cpg; ++cc) {
            const int c = g * cpg + cc;
            const std::size_t cbase = (static_cast<std::size_t>(n) * s.c + c) * hw;
            double dg = 0.0, db = 0.0;
            for (int i = 0; i < hw; ++i) {
              const double xhat = (xn->value[cbase + i] - m) * is;
              dg += self.grad[cbase + i] * xhat;
              db += self.grad[cbase + i];
            }
            if (gn->requires_grad) gn->grad[c] += dg;
            if (bn->requires_grad) bn->grad[c] += db;
          }
        }

        if (xn->requires_grad) {
          // dxhat = dy * gamma; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int cc = 0; cc < cpg; ++cc) {
            const int c = g * cpg + cc;
            const double ga = gn->value[c];
            const std::size_t cbase = (static_cast<std::size_t>(n) * s.c + c) * hw;
            for (int i = 0; i < hw; ++i) {
              const double dxh = self.grad[cbase + i] * ga;
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * (xn->value[cbase + i] - m) * is;
            }
          }
          const double inv_m = 1.0 / static_cast<double>(gsize);
          for (int cc = 0; cc < cpg; ++cc) {
            const int c = g * cpg + cc;
            const double ga = gn->value[c];
            const std::size_t cbase = (static_cast<std::size_t>(n) * s.c + c) * hw;
            for (int i = 0; i < hw; ++i) {
              const double xhat = (xn->value[cbase + i] - m) * is;
              const double dxh = self.grad[cbase + i] * ga;
              xn->grad[cbase + i] += is * (dxh - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
            }
          }
        }
        (void)gbase;
      }
    }
  });
}

// ---- resampling ------------------------------------------------------------

Var nearest_upsample2(const Var& x) {
  const Shape s = x.shape();
  Tensor out({s.n, s.c, s.h * 2, s.w * 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const double* src = x.value().data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
      double* dst = out.data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w * 4;
      for (int r = 0; r < s.h; ++r)
        for (int col = 0; col < s.w; ++col) {
          const double v = src[static_cast<std::size_t>(r) * s.w + col];
          const std::size_t o = (static_cast<std::size_t>(2 * r) * s.w * 2 + 2 * col);
          dst[o] = dst[o + 1] = dst[o + 2 * s.w] = dst[o + 2 * s.w + 1] = v;
        }
    }
  auto xn = x.shared();
  return finish(fresh(std::move(out)), {x}, [xn, s](Node& self) {
    xn->ensure_grad();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        double* gsrc = xn->grad.data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
        const double* g = self.grad.data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w * 4;
        for (int r = 0; r < s.h; ++r)
          for (int col = 0; col < s.w; ++col) {
            const std::size_t o = (static_cast<std::size_t>(2 * r) * s.w * 2 + 2 * col);
            gsrc[static_cast<std::size_t>(r) * s.w + col] += g[o] + g[o + 1] + g[o + 2 * s.w] + g[o + 2 * s.w + 1];
          }
      }
  });
}

Var avg_pool2(const Var& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw DimensionError("avg_pool2 requires even spatial dimensions");
  Tensor out({s.n, s.c, s.h / 2, s.w / 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const double* src = x.value().data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
      double* dst = out.data() + (static_cast<std::size_t>(n) * s.c + c) * (s.h / 2) * (s.w / 2);
      for (int r = 0; r < s.h / 2; ++r)
        for (int col = 0; col < s.w / 2; ++col) {
          const std::size_t i = static_cast<std::size_t>(2 * r) * s.w + 2 * col;
          dst[static_cast<std::size_t>(r) * (s.w / 2) + col] =
              0.25 * (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]);
        }
    }
  auto xn = x.shared();
  return finish(fresh(std::move(out)), {x}, [xn, s](Node& self) {
    xn->ensure_grad();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        double* gx = xn->grad.data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
        const double* g = self.grad.data() + (static_cast<std::size_t>(n) * s.c + c) * (s.h / 2) * (s.w / 2);
        for (int r = 0; r < s.h / 2; ++r)
          for (int col = 0; col < s.w / 2; ++col) {
            const double gv = 0.25 * g[static_cast<std::size_t>(r) * (s.w / 2) + col];
            const std::size_t i = static_cast<std::size_t>(2 * r) * s.w + 2 * col;
            gx[i] += gv;
            gx[i + 1] += gv;
            gx[i + s.w] += gv;
            gx[i + s.w + 1] += gv;
          }
      }
  });
}

// ---- wavelet ----------------------------------------------------------------

Var haar_dwt2(const Var& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw DimensionError("haar_dwt2 requires even spatial dimensions");
  const int h2 = s.h / 2, w2 = s.w / 2;
  Tensor out({s.n, s.c * 4, h2, w2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const double* src = x.value().data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
      const std::size_t obase = (static_cast<std::size_t>(n) * s.c * 4 + static_cast<std::size_t>(c) * 4) * h2 * w2;
      double* ll = out.data() + obase;
      double* lh = ll + static_cast<std::size_t>(h2) * w2;
      double* hl = lh + static_cast<std::size_t>(h2) * w2;
      double* hh = hl + static_cast<std::size_t>(h2) * w2;
      for (int r = 0; r < h2; ++r)
        for (int col = 0; col < w2; ++col) {
          const std::size_t i = static_cast<std::size_t>(2 * r) * s.w + 2 * col;
          const double a = src[i], b = src[i + 1], cc = src[i + s.w], d = src[i + s.w + 1];
          const std::size_t o = static_cast<std::size_t>(r) * w2 + col;
          ll[o] = (a + b + cc + d) / 2.0;
          lh[o] = (a + b - cc - d) / 2.0;
          hl[o] = (a - b + cc - d) / 2.0;
          hh[o] = (a - b - cc + d) / 2.0;
        }
    }
  auto xn = x.shared();
  return finish(fresh(std::move(out)), {x}, [xn, s, h2, w2](Node& self) {
    xn->ensure_grad();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        double* gx = xn->grad.data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
        const std::size_t obase = (static_cast<std::size_t>(n) * s.c * 4 + static_cast<std::size_t>(c) * 4) * h2 * w2;
        const double* gll = self.grad.data() + obase;
        const double* glh = gll + static_cast<std::size_t>(h2) * w2;
        const double* ghl = glh + static_cast<std::size_t>(h2) * w2;
        const double* ghh = ghl + static_cast<std::size_t>(h2) * w2;
        for (int r = 0; r < h2; ++r)
          for (int col = 0; col < w2; ++col) {
            const std::size_t o = static_cast<std::size_t>(r) * w2 + col;
            const double l = gll[o], y = glh[o], xg = ghl[o], z = ghh[o];
            const std::size_t i = static_cast<std::size_t>(2 * r) * s.w + 2 * col;
            // The analysis matrix is orthogonal and symmetric, so the adjoint
            // reuses the synthesis formulas.
            gx[i] += (l + xg + y + z) / 2.0;
            gx[i + 1] += (l - xg + y - z) / 2.0;
            gx[i + s.w] += (l + xg - y - z) / 2.0;
            gx[i + s.w + 1] += (l - xg - y + z) / 2.0;
          }
      }
  });
}

// ---- attention ---------------------------------------------------------------

Var attn_scores(const Var& q, const Var& k, int heads) {
  const Shape qs = q.shape(), ks = k.shape();
  if (qs.n != ks.n || qs.c != ks.c) throw DimensionError("attn_scores: q/k batch or channel mismatch");
  if (heads < 1 || qs.c % heads != 0) throw DimensionError("attn_scores: channels not divisible by heads");
  const int dq = qs.c / heads, tq = qs.h * qs.w, tk = ks.h * ks.w;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dq));
  Tensor out({qs.n, heads, tq, tk});
  for (int n = 0; n < qs.n; ++n)
    for (int m = 0; m < heads; ++m) {
      CMapRM qm(q.value().data() + (static_cast<std::size_t>(n) * qs.c + static_cast<std::size_t>(m) * dq) * tq, dq, tq);
      CMapRM km(k.value().data() + (static_cast<std::size_t>(n) * ks.c + static_cast<std::size_t>(m) * dq) * tk, dq, tk);
      MapRM om(out.data() + (static_cast<std::size_t>(n) * heads + m) * tq * tk, tq, tk);
      om.noalias() = sc * (qm.transpose() * km);
    }
  auto qn = q.shared(), kn = k.shared();
  return finish(fresh(std::move(out)), {q, k}, [=](Node& self) {
    for (int n = 0; n < qs.n; ++n)
      for (int m = 0; m < heads; ++m) {
        CMapRM go(self.grad.data() + (static_cast<std::size_t>(n) * heads + m) * tq * tk, tq, tk);
        if (qn->requires_grad) {
          qn->ensure_grad();
          MapRM gq(qn->grad.data() + (static_cast<std::size_t>(n) * qs.c + static_cast<std::size_t>(m) * dq) * tq, dq, tq);
          CMapRM km(kn->value.data() + (static_cast<std::size_t>(n) * ks.c + static_cast<std::size_t>(m) * dq) * tk, dq, tk);
          gq.noalias() += sc * (km * go.transpose());
        }
        if (kn->requires_grad) {
          kn->ensure_grad();
          MapRM gk(kn->grad.data() + (static_cast<std::size_t>(n) * ks.c + static_cast<std::size_t>(m) * dq) * tk, dq, tk);
          CMapRM qm(qn->value.data() + (static_cast<std::size_t>(n) * qs.c + static_cast<std::size_t>(m) * dq) * tq, dq, tq);
          gk.noalias() += sc * (qm * go);
        }
      }
  });
}

Var softmax_lastdim(const Var& scores) {
  const Shape s = scores.shape();
  const std::size_t rows = static_cast<std::size_t>(s.n) * s.c * s.h;
  const int cols = s.w;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = scores.value().data() + r * cols;
    double* dst = out.data() + r * cols;
    double mx = src[0];
    for (int i = 1; i < cols; ++i) mx = std::max(mx, src[i]);
    double sum = 0.0;
    for (int i = 0; i < cols; ++i) {
      dst[i] = std::exp(src[i] - mx);
      sum += dst[i];
    }
    for (int i = 0; i < cols; ++i) dst[i] /= sum;
  }
  auto sn = scores.shared();
  Tensor probs = out;  // shared buffer, kept for the backward closure
  return finish(fresh(std::move(out)), {scores}, [sn, probs, rows, cols](Node& self) {
    sn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = probs.data() + r * cols;
      const double* dy = self.grad.data() + r * cols;
      double dot = 0.0;
      for (int i = 0; i < cols; ++i) dot += dy[i] * y[i];
      double* ds = sn->grad.data() + r * cols;
      for (int i = 0; i < cols; ++i) ds[i] += (dy[i] - dot) * y[i];
    }
  });
}

Var attn_mix(const Var& probs, const Var& v, int heads, int out_h, int out_w) {
  const Shape ps = probs.shape(), vs = v.shape();
  const int tq = ps.h, tk = ps.w;
  if (ps.c != heads || vs.c % heads != 0 || ps.n != vs.n) throw DimensionError("attn_mix: head/batch mismatch");
  if (vs.h * vs.w != tk) throw DimensionError("attn_mix: value token count mismatch");
  if (out_h * out_w != tq) throw DimensionError("attn_mix: output spatial size mismatch");
  const int dq = vs.c / heads;
  Tensor out({ps.n, vs.c, out_h, out_w});
  for (int n = 0; n < ps.n; ++n)
    for (int m = 0; m < heads; ++m) {
      CMapRM pm(probs.value().data() + (static_cast<std::size_t>(n) * heads + m) * tq * tk, tq, tk);
      CMapRM vm(v.value().data() + (static_cast<std::size_t>(n) * vs.c + static_cast<std::size_t>(m) * dq) * tk, dq, tk);
      MapRM om(out.data() + (static_cast<std::size_t>(n) * vs.c + static_cast<std::size_t>(m) * dq) * tq, dq, tq);
      om.noalias() = vm * pm.transpose();
    }
  auto pn = probs.shared(), vn = v.shared();
  return finish(fresh(std::move(out)), {probs, v}, [=](Node& self) {
    for (int n = 0; n < ps.n; ++n)
      for (int m = 0; m < heads; ++m) {
        CMapRM go(self.grad.data() + (static_cast<std::size_t>(n) * vs.c + static_cast<std::size_t>(m) * dq) * tq, dq, tq);
        if (pn->requires_grad) {
          pn->ensure_grad();
          MapRM gp(pn->grad.data() + (static_cast<std::size_t>(n) * heads + m) * tq * tk, tq, tk);
          CMapRM vm(vn->value.data() + (static_cast<std::size_t>(n) * vs.c + static_cast<std::size_t>(m) * dq) * tk, dq, tk);
          gp.noalias() += go.transpose() * vm;
        }
        if (vn->requires_grad) {
          vn->ensure_grad();
          MapRM gv(vn->grad.data() + (static_cast<std::size_t>(n) * vs.c + static_cast<std::size_t>(m) * dq) * tk, dq, tk);
          CMapRM pm(pn->value.data() + (static_cast<std::size_t>(n) * heads + m) * tq * tk, tq, tk);
          gv.noalias() += go * pm;
        }
      }
  });
}

// ---- losses ------------------------------------------------------------------

Var mean_abs_diff(const Var& a, const Var& b) {
  if (!(a.shape() == b.shape())) throw DimensionError("mean_abs_diff: shape mismatch");
  const std::size_t n = a.value().numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::fabs(a.value()[i] - b.value()[i]);
  Tensor out(Shape{1, 1, 1, 1});
  out[0] = acc / static_cast<double>(n);
  auto an = a.shared(), bn = b.shared();
  return finish(fresh(std::move(out)), {a, b}, [an, bn, n](Node& self) {
    const double g = self.grad[0] / static_cast<double>(n);
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double d = an->value[i] - bn->value[i];
      const double sg = d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
      if (an->requires_grad) an->grad[i] += sg;
      if (bn->requires_grad) bn->grad[i] -= sg;
    }
  });
}

Var mean_sq_diff(const Var& a, const Var& b) {
  if (!(a.shape() == b.shape())) throw DimensionError("mean_sq_diff: shape mismatch");
  const std::size_t n = a.value().numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  Tensor out(Shape{1, 1, 1, 1});
  out[0] = acc / static_cast<double>(n);
  auto an = a.shared(), bn = b.shared();
  return finish(fresh(std::move(out)), {a, b}, [an, bn, n](Node& self) {
    const double g = 2.0 * self.grad[0] / static_cast<double>(n);
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double d = g * (an->value[i] - bn->value[i]);
      if (an->requires_grad) an->grad[i] += d;
      if (bn->requires_grad) bn->grad[i] -= d;
    }
  });
}

Var detach(const Var& x) {
  auto n = fresh(x.value());  // shares the buffer
  n->requires_grad = false;
  return Var(std::move(n));
}

}  // namespace fddm::nn
