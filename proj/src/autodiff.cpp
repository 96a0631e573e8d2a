#include "bifp/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace bifp {

namespace {
std::atomic<int64_t> g_next_id{1};

Var make_node(Tensor v, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->id = g_next_id.fetch_add(1);
  bool needs = false;
  for (auto& p : parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backprop = std::move(fn);
  }
  return n;
}
}  // namespace

Var make_const(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->id = g_next_id.fetch_add(1);
  return n;
}

Var make_param(Tensor v) {
  auto n = make_const(std::move(v));
  n->requires_grad = true;
  return n;
}

void backward(const Var& root) {
  if (root->value.numel() != 1) fail("InternalError", "backward: root must be scalar");
  // collect reachable grad-requiring nodes
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
  root->ensure_grad();
  root->grad.data[0] += 1.0;
  for (Node* n : order) {
    if (n->backprop && n->grad.shape == n->value.shape) n->backprop(*n);
  }
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * a->value[i];
    }
  });
}

Var affine(const Var& x, double scale, double shift) {
  Tensor out = x->value;
  for (auto& v : out.data) v = scale * v + shift;
  return make_node(std::move(out), {x}, [x, scale](Node& n) {
    auto& g = x->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += scale * n.grad[i];
  });
}

Var relu(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {x}, [x](Node& n) {
    auto& g = x->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      if (x->value[i] > 0.0) g[i] += n.grad[i];
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  auto y = make_node(std::move(out), {x}, nullptr);
  if (y->requires_grad) {
    Var yv = y;  // capture by value for the closure
    y->backprop = [x](Node& n) {
      auto& g = x->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) {
        double s = n.value[i];
        g[i] += n.grad[i] * s * (1.0 - s);
      }
    };
  }
  return y;
}

Var tanh_op(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.data) v = std::tanh(v);
  auto y = make_node(std::move(out), {x}, nullptr);
  if (y->requires_grad) {
    y->backprop = [x](Node& n) {
      auto& g = x->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) {
        double t = n.value[i];
        g[i] += n.grad[i] * (1.0 - t * t);
      }
    };
  }
  return y;
}

// ---------------- dense ----------------

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
    fail("ShapeMismatch", "linear: x " + xv.shape_str() + " w " + wv.shape_str());
  const int64_t B = xv.dim(0), I = xv.dim(1), O = wv.dim(0);
  if (b && b->value.numel() != O) fail("ShapeMismatch", "linear: bias size");
  Tensor out({B, O});
  for (int64_t r = 0; r < B; ++r) {
    const double* xr = &xv.data[static_cast<size_t>(r * I)];
    double* yr = &out.data[static_cast<size_t>(r * O)];
    for (int64_t o = 0; o < O; ++o) {
      const double* wr = &wv.data[static_cast<size_t>(o * I)];
      double acc = b ? b->value[o] : 0.0;
      for (int64_t i = 0; i < I; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_node(std::move(out), std::move(parents), [x, w, b, B, I, O](Node& n) {
    const Tensor& gy = n.grad;
    if (x->requires_grad) {
      auto& gx = x->ensure_grad();
      for (int64_t r = 0; r < B; ++r)
        for (int64_t o = 0; o < O; ++o) {
          double g = gy[r * O + o];
          const double* wr = &w->value.data[static_cast<size_t>(o * I)];
          double* gxr = &gx.data[static_cast<size_t>(r * I)];
          for (int64_t i = 0; i < I; ++i) gxr[i] += g * wr[i];
        }
    }
    if (w->requires_grad) {
      auto& gw = w->ensure_grad();
      for (int64_t r = 0; r < B; ++r)
        for (int64_t o = 0; o < O; ++o) {
          double g = gy[r * O + o];
          const double* xr = &x->value.data[static_cast<size_t>(r * I)];
          double* gwr = &gw.data[static_cast<size_t>(o * I)];
          for (int64_t i = 0; i < I; ++i) gwr[i] += g * xr[i];
        }
    }
    if (b && b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int64_t r = 0; r < B; ++r)
        for (int64_t o = 0; o < O; ++o) gb[o] += gy[r * O + o];
    }
  });
}

// ---------------- conv stack ----------------

namespace {
inline int64_t conv_out_dim(int64_t in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}
}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, std::array<int, 3> stride,
           std::array<int, 3> pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.rank() != 5 || wv.rank() != 5 || xv.dim(1) != wv.dim(1))
    fail("ShapeMismatch", "conv3d: x " + xv.shape_str() + " w " + wv.shape_str());
  const int64_t B = xv.dim(0), C = xv.dim(1), T = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
  const int64_t O = wv.dim(0), KT = wv.dim(2), KH = wv.dim(3), KW = wv.dim(4);
  const int st = stride[0], sh = stride[1], sw = stride[2];
  const int pt = pad[0], ph = pad[1], pw = pad[2];
  const int64_t OT = conv_out_dim(T, static_cast<int>(KT), st, pt);
  const int64_t OH = conv_out_dim(H, static_cast<int>(KH), sh, ph);
  const int64_t OW = conv_out_dim(W, static_cast<int>(KW), sw, pw);
  if (OT <= 0 || OH <= 0 || OW <= 0) fail("ShapeMismatch", "conv3d: output collapses");

  Tensor out({B, O, OT, OH, OW});
  for (int64_t n = 0; n < B; ++n)
    for (int64_t o = 0; o < O; ++o) {
      const double bias = b ? b->value[o] : 0.0;
      for (int64_t ot = 0; ot < OT; ++ot)
        for (int64_t oh = 0; oh < OH; ++oh)
          for (int64_t ow = 0; ow < OW; ++ow) {
            double acc = bias;
            for (int64_t c = 0; c < C; ++c)
              for (int64_t kt = 0; kt < KT; ++kt) {
                const int64_t it = ot * st - pt + kt;
                if (it < 0 || it >= T) continue;
                for (int64_t kh = 0; kh < KH; ++kh) {
                  const int64_t ih = oh * sh - ph + kh;
                  if (ih < 0 || ih >= H) continue;
                  const double* xrow = &xv.data[static_cast<size_t>(
                      (((n * C + c) * T + it) * H + ih) * W)];
                  const double* wrow = &wv.data[static_cast<size_t>(
                      (((o * C + c) * KT + kt) * KH + kh) * KW)];
                  for (int64_t kw = 0; kw < KW; ++kw) {
                    const int64_t iw = ow * sw - pw + kw;
                    if (iw < 0 || iw >= W) continue;
                    acc += xrow[iw] * wrow[kw];
                  }
                }
              }
            out[(((n * O + o) * OT + ot) * OH + oh) * OW + ow] = acc;
          }
    }

  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_node(
      std::move(out), std::move(parents),
      [x, w, b, B, C, T, H, W, O, KT, KH, KW, st, sh, sw, pt, ph, pw, OT, OH, OW](Node& nd) {
        const Tensor& gy = nd.grad;
        const bool need_x = x->requires_grad;
        const bool need_w = w->requires_grad;
        if (need_x) x->ensure_grad();
        if (need_w) w->ensure_grad();
        if (b && b->requires_grad) {
          auto& gb = b->ensure_grad();
          for (int64_t n = 0; n < B; ++n)
            for (int64_t o = 0; o < O; ++o) {
              const double* gyo =
                  &gy.data[static_cast<size_t>(((n * O + o) * OT) * OH * OW)];
              double acc = 0.0;
              for (int64_t i = 0; i < OT * OH * OW; ++i) acc += gyo[i];
              gb[o] += acc;
            }
        }
        if (!need_x && !need_w) return;
        for (int64_t n = 0; n < B; ++n)
          for (int64_t o = 0; o < O; ++o)
            for (int64_t ot = 0; ot < OT; ++ot)
              for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                  const double g =
                      gy[(((n * O + o) * OT + ot) * OH + oh) * OW + ow];
                  if (g == 0.0) continue;
                  for (int64_t c = 0; c < C; ++c)
                    for (int64_t kt = 0; kt < KT; ++kt) {
                      const int64_t it = ot * st - pt + kt;
                      if (it < 0 || it >= T) continue;
                      for (int64_t kh = 0; kh < KH; ++kh) {
                        const int64_t ih = oh * sh - ph + kh;
                        if (ih < 0 || ih >= H) continue;
                        const size_t xbase = static_cast<size_t>(
                            (((n * C + c) * T + it) * H + ih) * W);
                        const size_t wbase = static_cast<size_t>(
                            (((o * C + c) * KT + kt) * KH + kh) * KW);
                        for (int64_t kw = 0; kw < KW; ++kw) {
                          const int64_t iw = ow * sw - pw + kw;
                          if (iw < 0 || iw >= W) continue;
                          if (need_x)
                            x->grad.data[xbase + static_cast<size_t>(iw)] +=
                                g * w->value.data[wbase + static_cast<size_t>(kw)];
                          if (need_w)
                            w->grad.data[wbase + static_cast<size_t>(kw)] +=
                                g * x->value.data[xbase + static_cast<size_t>(iw)];
                        }
                      }
                    }
                }
      });
}

Var maxpool3d(const Var& x, std::array<int, 3> kernel, std::array<int, 3> stride,
              std::array<int, 3> pad) {
  const Tensor& xv = x->value;
  if (xv.rank() != 5) fail("ShapeMismatch", "maxpool3d: need rank-5 input");
  const int64_t B = xv.dim(0), C = xv.dim(1), T = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
  const int kt = kernel[0], kh = kernel[1], kw = kernel[2];
  const int st = stride[0], sh = stride[1], sw = stride[2];
  const int pt = pad[0], ph = pad[1], pw = pad[2];
  const int64_t OT = conv_out_dim(T, kt, st, pt);
  const int64_t OH = conv_out_dim(H, kh, sh, ph);
  const int64_t OW = conv_out_dim(W, kw, sw, pw);
  if (OT <= 0 || OH <= 0 || OW <= 0) fail("ShapeMismatch", "maxpool3d: output collapses");

  Tensor out({B, C, OT, OH, OW});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
  int64_t oi = 0;
  for (int64_t n = 0; n < B; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t ot = 0; ot < OT; ++ot)
        for (int64_t oh = 0; oh < OH; ++oh)
          for (int64_t ow = 0; ow < OW; ++ow, ++oi) {
            double best = -HUGE_VAL;
            int64_t besti = -1;
            for (int a = 0; a < kt; ++a) {
              const int64_t it = ot * st - pt + a;
              if (it < 0 || it >= T) continue;
              for (int bb = 0; bb < kh; ++bb) {
                const int64_t ih = oh * sh - ph + bb;
                if (ih < 0 || ih >= H) continue;
                for (int cc = 0; cc < kw; ++cc) {
                  const int64_t iw = ow * sw - pw + cc;
                  if (iw < 0 || iw >= W) continue;
                  const int64_t xi = (((n * C + c) * T + it) * H + ih) * W + iw;
                  if (xv[xi] > best) {
                    best = xv[xi];
                    besti = xi;
                  }
                }
              }
            }
            out[oi] = best;
            (*argmax)[static_cast<size_t>(oi)] = besti;
          }
  return make_node(std::move(out), {x}, [x, argmax](Node& n) {
    auto& gx = x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      const int64_t xi = (*argmax)[static_cast<size_t>(i)];
      if (xi >= 0) gx[xi] += n.grad[i];
    }
  });
}

Var batchnorm3d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                Tensor& running_var, bool training, double momentum, double eps) {
  const Tensor& xv = x->value;
  if (xv.rank() != 5) fail("ShapeMismatch", "batchnorm3d: need rank-5 input");
  const int64_t B = xv.dim(0), C = xv.dim(1);
  const int64_t S = xv.dim(2) * xv.dim(3) * xv.dim(4);
  if (gamma->value.numel() != C || beta->value.numel() != C ||
      running_mean.numel() != C || running_var.numel() != C)
    fail("ShapeMismatch", "batchnorm3d: channel parameter size");
  const int64_t N = B * S;

  Tensor mean({C}), var({C});
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (int64_t n = 0; n < B; ++n) {
        const double* row = &xv.data[static_cast<size_t>((n * C + c) * S)];
        for (int64_t i = 0; i < S; ++i) m += row[i];
      }
      m /= static_cast<double>(N);
      double v = 0.0;
      for (int64_t n = 0; n < B; ++n) {
        const double* row = &xv.data[static_cast<size_t>((n * C + c) * S)];
        for (int64_t i = 0; i < S; ++i) {
          double d = row[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(N);
      mean[c] = m;
      var[c] = v;
      // running stats keep the unbiased variance
      double unbiased = N > 1 ? v * static_cast<double>(N) / static_cast<double>(N - 1) : v;
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * m;
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    }
  } else {
    mean = running_mean;
    var = running_var;
  }

  Tensor out(xv.shape);
  auto xhat = std::make_shared<Tensor>(xv.shape);
  auto inv_std = std::make_shared<Tensor>(std::vector<int64_t>{C});
  for (int64_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + eps);
  for (int64_t n = 0; n < B; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double m = mean[c], is = (*inv_std)[c];
      const double g = gamma->value[c], bta = beta->value[c];
      const size_t base = static_cast<size_t>((n * C + c) * S);
      for (int64_t i = 0; i < S; ++i) {
        double xh = (xv.data[base + static_cast<size_t>(i)] - m) * is;
        (*xhat).data[base + static_cast<size_t>(i)] = xh;
        out.data[base + static_cast<size_t>(i)] = g * xh + bta;
      }
    }

  return make_node(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat, inv_std, training, B, C, S, N](Node& nd) {
                     const Tensor& gy = nd.grad;
                     if (gamma->requires_grad) {
                       auto& gg = gamma->ensure_grad();
                       for (int64_t n = 0; n < B; ++n)
                         for (int64_t c = 0; c < C; ++c) {
                           const size_t base = static_cast<size_t>((n * C + c) * S);
                           double acc = 0.0;
                           for (int64_t i = 0; i < S; ++i)
                             acc += gy.data[base + static_cast<size_t>(i)] *
                                    xhat->data[base + static_cast<size_t>(i)];
                           gg[c] += acc;
                         }
                     }
                     if (beta->requires_grad) {
                       auto& gb = beta->ensure_grad();
                       for (int64_t n = 0; n < B; ++n)
                         for (int64_t c = 0; c < C; ++c) {
                           const size_t base = static_cast<size_t>((n * C + c) * S);
                           double acc = 0.0;
                           for (int64_t i = 0; i < S; ++i)
                             acc += gy.data[base + static_cast<size_t>(i)];
                           gb[c] += acc;
                         }
                     }
                     if (!x->requires_grad) return;
                     auto& gx = x->ensure_grad();
                     if (!training) {
                       for (int64_t n = 0; n < B; ++n)
                         for (int64_t c = 0; c < C; ++c) {
                           const double k = gamma->value[c] * (*inv_std)[c];
                           const size_t base = static_cast<size_t>((n * C + c) * S);
                           for (int64_t i = 0; i < S; ++i)
                             gx.data[base + static_cast<size_t>(i)] +=
                                 k * gy.data[base + static_cast<size_t>(i)];
                         }
                       return;
                     }
                     // training mode: mean/var depend on x
                     for (int64_t c = 0; c < C; ++c) {
                       double sum_gy = 0.0, sum_gy_xhat = 0.0;
                       for (int64_t n = 0; n < B; ++n) {
                         const size_t base = static_cast<size_t>((n * C + c) * S);
                         for (int64_t i = 0; i < S; ++i) {
                           const double g = gy.data[base + static_cast<size_t>(i)];
                           sum_gy += g;
                           sum_gy_xhat += g * xhat->data[base + static_cast<size_t>(i)];
                         }
                       }
                       const double k = gamma->value[c] * (*inv_std)[c];
                       const double invN = 1.0 / static_cast<double>(N);
                       for (int64_t n = 0; n < B; ++n) {
                         const size_t base = static_cast<size_t>((n * C + c) * S);
                         for (int64_t i = 0; i < S; ++i) {
                           const double g = gy.data[base + static_cast<size_t>(i)];
                           const double xh = xhat->data[base + static_cast<size_t>(i)];
                           gx.data[base + static_cast<size_t>(i)] +=
                               k * (g - invN * sum_gy - invN * xh * sum_gy_xhat);
                         }
                       }
                     }
                   });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x->value;
  if (xv.rank() != 5) fail("ShapeMismatch", "global_avg_pool: need rank-5 input");
  const int64_t B = xv.dim(0), C = xv.dim(1);
  const int64_t S = xv.dim(2) * xv.dim(3) * xv.dim(4);
  Tensor out({B, C});
  for (int64_t n = 0; n < B; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* row = &xv.data[static_cast<size_t>((n * C + c) * S)];
      double acc = 0.0;
      for (int64_t i = 0; i < S; ++i) acc += row[i];
      out[n * C + c] = acc / static_cast<double>(S);
    }
  return make_node(std::move(out), {x}, [x, B, C, S](Node& nd) {
    auto& gx = x->ensure_grad();
    const double inv = 1.0 / static_cast<double>(S);
    for (int64_t n = 0; n < B; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const double g = nd.grad[n * C + c] * inv;
        double* row = &gx.data[static_cast<size_t>((n * C + c) * S)];
        for (int64_t i = 0; i < S; ++i) row[i] += g;
      }
  });
}

Var grid_avg_pool(const Var& x, int gh, int gw) {
  const Tensor& xv = x->value;
  if (xv.rank() != 5) fail("ShapeMismatch", "grid_avg_pool: need rank-5 input");
  const int64_t B = xv.dim(0), C = xv.dim(1), T = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
  if (H % gh != 0 || W % gw != 0)
    fail("ShapeMismatch", "grid_avg_pool: " + xv.shape_str() + " does not tile into " +
                              std::to_string(gh) + "x" + std::to_string(gw));
  const int64_t bh = H / gh, bw = W / gw;
  const int64_t cells = static_cast<int64_t>(gh) * gw;
  Tensor out({B * cells, C});
  const double inv = 1.0 / static_cast<double>(T * bh * bw);
  for (int64_t n = 0; n < B; ++n)
    for (int64_t gy = 0; gy < gh; ++gy)
      for (int64_t gx_ = 0; gx_ < gw; ++gx_) {
        const int64_t cell = gy * gw + gx_;
        for (int64_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int64_t t = 0; t < T; ++t)
            for (int64_t h = gy * bh; h < (gy + 1) * bh; ++h) {
              const double* row =
                  &xv.data[static_cast<size_t>((((n * C + c) * T + t) * H + h) * W)];
              for (int64_t w_ = gx_ * bw; w_ < (gx_ + 1) * bw; ++w_) acc += row[w_];
            }
          out[(n * cells + cell) * C + c] = acc * inv;
        }
      }
  return make_node(std::move(out), {x}, [x, B, C, T, H, W, gh, gw, bh, bw, inv](Node& nd) {
    auto& gxt = x->ensure_grad();
    const int64_t cells = static_cast<int64_t>(gh) * gw;
    for (int64_t n = 0; n < B; ++n)
      for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx_ = 0; gx_ < gw; ++gx_) {
          const int64_t cell = gy * gw + gx_;
          for (int64_t c = 0; c < C; ++c) {
            const double g = nd.grad[(n * cells + cell) * C + c] * inv;
            for (int64_t t = 0; t < T; ++t)
              for (int64_t h = gy * bh; h < (gy + 1) * bh; ++h) {
                double* row =
                    &gxt.data[static_cast<size_t>((((n * C + c) * T + t) * H + h) * W)];
                for (int64_t w_ = gx_ * bw; w_ < (gx_ + 1) * bw; ++w_) row[w_] += g;
              }
          }
        }
  });
}

// ---------------- row plumbing ----------------

Var gather_rows(const Var& x, std::vector<int64_t> idx) {
  const Tensor& xv = x->value;
  if (xv.rank() != 2) fail("ShapeMismatch", "gather_rows: need [R,d]");
  const int64_t R = xv.dim(0), D = xv.dim(1);
  for (int64_t i : idx)
    if (i < 0 || i >= R) fail("InternalError", "gather_rows: index out of range");
  Tensor out({static_cast<int64_t>(idx.size()), D});
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy_n(&xv.data[static_cast<size_t>(idx[k] * D)], D,
                &out.data[k * static_cast<size_t>(D)]);
  auto ix = std::make_shared<std::vector<int64_t>>(std::move(idx));
  return make_node(std::move(out), {x}, [x, ix, D](Node& nd) {
    auto& gx = x->ensure_grad();
    for (size_t k = 0; k < ix->size(); ++k) {
      const double* src = &nd.grad.data[k * static_cast<size_t>(D)];
      double* dst = &gx.data[static_cast<size_t>((*ix)[k] * D)];
      for (int64_t i = 0; i < D; ++i) dst[i] += src[i];
    }
  });
}

Var concat_rows(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
    fail("ShapeMismatch", "concat_rows: " + av.shape_str() + " vs " + bv.shape_str());
  const int64_t Ra = av.dim(0), Rb = bv.dim(0), D = av.dim(1);
  Tensor out({Ra + Rb, D});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.data.size());
  return make_node(std::move(out), {a, b}, [a, b, Ra, Rb, D](Node& nd) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (int64_t i = 0; i < Ra * D; ++i) ga[i] += nd.grad[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int64_t i = 0; i < Rb * D; ++i) gb[i] += nd.grad[Ra * D + i];
    }
  });
}

Var mean_rows_grouped(const Var& x, int64_t group_size) {
  const Tensor& xv = x->value;
  if (xv.rank() != 2 || xv.dim(0) % group_size != 0)
    fail("ShapeMismatch", "mean_rows_grouped: rows not divisible by group");
  const int64_t G = xv.dim(0) / group_size, D = xv.dim(1);
  Tensor out({G, D});
  const double inv = 1.0 / static_cast<double>(group_size);
  for (int64_t g = 0; g < G; ++g)
    for (int64_t s = 0; s < group_size; ++s) {
      const double* src = &xv.data[static_cast<size_t>((g * group_size + s) * D)];
      double* dst = &out.data[static_cast<size_t>(g * D)];
      for (int64_t i = 0; i < D; ++i) dst[i] += src[i] * inv;
    }
  return make_node(std::move(out), {x}, [x, G, D, group_size, inv](Node& nd) {
    auto& gx = x->ensure_grad();
    for (int64_t g = 0; g < G; ++g)
      for (int64_t s = 0; s < group_size; ++s) {
        const double* src = &nd.grad.data[static_cast<size_t>(g * D)];
        double* dst = &gx.data[static_cast<size_t>((g * group_size + s) * D)];
        for (int64_t i = 0; i < D; ++i) dst[i] += src[i] * inv;
      }
  });
}

// ---------------- losses ----------------

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Tensor& lv = logits->value;
  if (lv.rank() != 2 || static_cast<size_t>(lv.dim(0)) != labels.size())
    fail("ShapeMismatch", "softmax_cross_entropy: logits/labels mismatch");
  const int64_t B = lv.dim(0), K = lv.dim(1);
  for (int l : labels)
    if (l < 0 || l >= K) fail("HeadShapeMismatch", "label outside logit range");
  auto probs = std::make_shared<Tensor>(lv.shape);
  double total = 0.0;
  for (int64_t r = 0; r < B; ++r) {
    const double* row = &lv.data[static_cast<size_t>(r * K)];
    double mx = row[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    const double logz = mx + std::log(z);
    for (int64_t k = 0; k < K; ++k)
      probs->data[static_cast<size_t>(r * K + k)] = std::exp(row[k] - logz);
    total += logz - row[labels[static_cast<size_t>(r)]];
  }
  Tensor out({1});
  out[0] = total / static_cast<double>(B);
  auto lab = std::make_shared<std::vector<int>>(labels);
  return make_node(std::move(out), {logits}, [logits, probs, lab, B, K](Node& nd) {
    auto& gx = logits->ensure_grad();
    const double g = nd.grad[0] / static_cast<double>(B);
    for (int64_t r = 0; r < B; ++r)
      for (int64_t k = 0; k < K; ++k) {
        double p = probs->data[static_cast<size_t>(r * K + k)];
        if (k == (*lab)[static_cast<size_t>(r)]) p -= 1.0;
        gx[r * K + k] += g * p;
      }
  });
}

double fd_gradient(const std::function<double()>& f, double* slot, double h) {
  const double saved = *slot;
  *slot = saved + h;
  const double fp = f();
  *slot = saved - h;
  const double fm = f();
  *slot = saved;
  return (fp - fm) / (2.0 * h);
}

}  // namespace bifp
