#ifndef CMAMBA_OPS_HPP
#define CMAMBA_OPS_HPP

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "cmamba/autograd.hpp"

namespace cmamba {

inline void check_same_shape(const Var& a, const Var& b, const char* what) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                Tensor::shape_str(a->value.shape()) + " vs " +
                                Tensor::shape_str(b->value.shape()));
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    n.inputs[0]->accumulate(n.grad);
    n.inputs[1]->accumulate(n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    n.inputs[0]->accumulate(n.grad);
    if (n.inputs[1]->requires_grad) {
      Tensor g = n.grad;
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = -g[i];
      n.inputs[1]->accumulate(g);
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    if (n.inputs[0]->requires_grad) {
      Tensor g = n.grad;
      for (int64_t i = 0; i < g.numel(); ++i) g[i] *= n.inputs[1]->value[i];
      n.inputs[0]->accumulate(g);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor g = n.grad;
      for (int64_t i = 0; i < g.numel(); ++i) g[i] *= n.inputs[0]->value[i];
      n.inputs[1]->accumulate(g);
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
  Tensor saved = out;
  return make_op(std::move(out), {a, b}, [saved](Node& n) {
    if (n.inputs[0]->requires_grad) {
      Tensor g = n.grad;
      for (int64_t i = 0; i < g.numel(); ++i) g[i] /= n.inputs[1]->value[i];
      n.inputs[0]->accumulate(g);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor g = n.grad;
      for (int64_t i = 0; i < g.numel(); ++i) g[i] *= -saved[i] / n.inputs[1]->value[i];
      n.inputs[1]->accumulate(g);
    }
  });
}

// out = scale * x + shift
inline Var affine(const Var& x, double scale, double shift) {
  Tensor out = x->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = scale * out[i] + shift;
  return make_op(std::move(out), {x}, [scale](Node& n) {
    Tensor g = n.grad;
    for (int64_t i = 0; i < g.numel(); ++i) g[i] *= scale;
    n.inputs[0]->accumulate(g);
  });
}

inline Var mul_scalar(const Var& x, double s) { return affine(x, s, 0.0); }
inline Var add_scalar(const Var& x, double s) { return affine(x, 1.0, s); }
inline Var neg(const Var& x) { return affine(x, -1.0, 0.0); }
inline Var one_minus(const Var& x) { return affine(x, -1.0, 1.0); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
inline Var unary_op(const Var& x, double (*f)(double), double (*dfdx)(double, double)) {
  Tensor out = x->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(out[i]);
  Tensor saved = out;
  return make_op(std::move(out), {x}, [saved, dfdx](Node& n) {
    Tensor g = n.grad;
    for (int64_t i = 0; i < g.numel(); ++i) g[i] *= dfdx(n.inputs[0]->value[i], saved[i]);
    n.inputs[0]->accumulate(g);
  });
}

inline double sigmoid_v(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
inline double softplus_v(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
}  // namespace detail

inline Var sigmoid(const Var& x) {
  return detail::unary_op(x, +[](double v) { return detail::sigmoid_v(v); },
                          +[](double, double y) { return y * (1.0 - y); });
}

inline Var silu(const Var& x) {
  return detail::unary_op(x, +[](double v) { return v * detail::sigmoid_v(v); },
                          +[](double v, double) {
                            double s = detail::sigmoid_v(v);
                            return s * (1.0 + v * (1.0 - s));
                          });
}

inline Var tanh_op(const Var& x) {
  return detail::unary_op(x, +[](double v) { return std::tanh(v); },
                          +[](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& x) {
  return detail::unary_op(x, +[](double v) { return v > 0.0 ? v : 0.0; },
                          +[](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var softplus(const Var& x) {
  return detail::unary_op(x, +[](double v) { return detail::softplus_v(v); },
                          +[](double v, double) { return detail::sigmoid_v(v); });
}

inline Var exp_op(const Var& x) {
  return detail::unary_op(x, +[](double v) { return std::exp(v); },
                          +[](double, double y) { return y; });
}

inline Var log_op(const Var& x) {
  return detail::unary_op(x, +[](double v) { return std::log(v); },
                          +[](double v, double) { return 1.0 / v; });
}

inline Var pow_const(const Var& x, double p) {
  Tensor out = x->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], p);
  return make_op(std::move(out), {x}, [p](Node& n) {
    Tensor g = n.grad;
    for (int64_t i = 0; i < g.numel(); ++i)
      g[i] *= p * std::pow(n.inputs[0]->value[i], p - 1.0);
    n.inputs[0]->accumulate(g);
  });
}

inline Var clamp_min_op(const Var& x, double lo) {
  Tensor out = x->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], lo);
  return make_op(std::move(out), {x}, [lo](Node& n) {
    Tensor g = n.grad;
    for (int64_t i = 0; i < g.numel(); ++i)
      if (n.inputs[0]->value[i] <= lo) g[i] = 0.0;
    n.inputs[0]->accumulate(g);
  });
}

// Clamp to [0,1]; subgradient passes only strictly inside the interval.
inline Var clamp_unit(const Var& x) {
  Tensor out = x->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
  return make_op(std::move(out), {x}, [](Node& n) {
    Tensor g = n.grad;
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double v = n.inputs[0]->value[i];
      if (v <= 0.0 || v >= 1.0) g[i] = 0.0;
    }
    n.inputs[0]->accumulate(g);
  });
}

// Standard normal CDF; gradient is the normal pdf.
inline Var normal_cdf_op(const Var& x) {
  // 1/sqrt(2) and 1/sqrt(2*pi)
  return detail::unary_op(
      x, +[](double v) { return 0.5 * std::erfc(-v * 0.70710678118654752440); },
      +[](double v, double) { return 0.39894228040143267794 * std::exp(-0.5 * v * v); });
}

// Rounds half away from zero in the forward pass, passes gradients through.
inline Var ste_round(const Var& x) {
  Tensor out = x->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = round_away(out[i]);
  return make_op(std::move(out), {x}, [](Node& n) { n.inputs[0]->accumulate(n.grad); });
}

inline Var detach(const Var& x) { return constant(x->value); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
  return make_op(Tensor::scalar(s), {x}, [](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Tensor g = Tensor::full(n.inputs[0]->value.shape(), n.grad[0]);
    n.inputs[0]->accumulate(g);
  });
}

inline Var mean_all(const Var& x) {
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x->value.numel()));
}

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------

// x: [Ci], w: [Co,Ci], b: [Co] -> [Co]
inline Var linear_vec(const Var& x, const Var& w, const Var& b) {
  const int ci = x->value.dim(0);
  const int co = w->value.dim(0);
  if (w->value.dim(1) != ci || b->value.dim(0) != co)
    throw std::invalid_argument("linear_vec: channel mismatch");
  Tensor out({co});
  for (int o = 0; o < co; ++o) {
    double s = b->value[o];
    for (int i = 0; i < ci; ++i) s += w->value[static_cast<int64_t>(o) * ci + i] * x->value[i];
    out[o] = s;
  }
  return make_op(std::move(out), {x, w, b}, [ci, co](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& xv = n.inputs[0]->value;
    const Tensor& wv = n.inputs[1]->value;
    if (n.inputs[0]->requires_grad) {
      Tensor gx({ci});
      for (int o = 0; o < co; ++o)
        for (int i = 0; i < ci; ++i) gx[i] += g[o] * wv[static_cast<int64_t>(o) * ci + i];
      n.inputs[0]->accumulate(gx);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor gw({co, ci});
      for (int o = 0; o < co; ++o)
        for (int i = 0; i < ci; ++i) gw[static_cast<int64_t>(o) * ci + i] = g[o] * xv[i];
      n.inputs[1]->accumulate(gw);
    }
    n.inputs[2]->accumulate(g);
  });
}

// Per-position channel mixing. x: [Ci,H,W], w: [Co,Ci], b: [Co] -> [Co,H,W]
inline Var conv1x1(const Var& x, const Var& w, const Var& b) {
  if (x->value.rank() != 3) throw std::invalid_argument("conv1x1: expected [C,H,W]");
  const int ci = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  const int co = w->value.dim(0);
  if (w->value.dim(1) != ci || b->value.dim(0) != co)
    throw std::invalid_argument("conv1x1: channel mismatch");
  const int64_t hw = static_cast<int64_t>(h) * wd;
  Tensor out({co, h, wd});
  for (int o = 0; o < co; ++o) {
    double* op = out.data() + o * hw;
    for (int64_t p = 0; p < hw; ++p) op[p] = b->value[o];
    for (int i = 0; i < ci; ++i) {
      const double wv = w->value[static_cast<int64_t>(o) * ci + i];
      const double* xp = x->value.data() + i * hw;
      for (int64_t p = 0; p < hw; ++p) op[p] += wv * xp[p];
    }
  }
  return make_op(std::move(out), {x, w, b}, [ci, co, hw](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& xv = n.inputs[0]->value;
    const Tensor& wv = n.inputs[1]->value;
    if (n.inputs[0]->requires_grad) {
      Tensor gx(xv.shape());
      for (int o = 0; o < co; ++o) {
        const double* gp = g.data() + o * hw;
        for (int i = 0; i < ci; ++i) {
          const double wgt = wv[static_cast<int64_t>(o) * ci + i];
          double* gxp = gx.data() + i * hw;
          for (int64_t p = 0; p < hw; ++p) gxp[p] += wgt * gp[p];
        }
      }
      n.inputs[0]->accumulate(gx);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor gw({co, ci});
      for (int o = 0; o < co; ++o) {
        const double* gp = g.data() + o * hw;
        for (int i = 0; i < ci; ++i) {
          const double* xp = xv.data() + i * hw;
          double s = 0.0;
          for (int64_t p = 0; p < hw; ++p) s += gp[p] * xp[p];
          gw[static_cast<int64_t>(o) * ci + i] = s;
        }
      }
      n.inputs[1]->accumulate(gw);
    }
    if (n.inputs[2]->requires_grad) {
      Tensor gb({co});
      for (int o = 0; o < co; ++o) {
        const double* gp = g.data() + o * hw;
        double s = 0.0;
        for (int64_t p = 0; p < hw; ++p) s += gp[p];
        gb[o] = s;
      }
      n.inputs[2]->accumulate(gb);
    }
  });
}

// x: [Ci,H,W], w: [Co,Ci,K,K], b: [Co]; zero padding `pad`, stride `stride`.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  if (x->value.rank() != 3 || w->value.rank() != 4)
    throw std::invalid_argument("conv2d: expected x [C,H,W], w [Co,Ci,K,K]");
  const int ci = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  const int co = w->value.dim(0), k = w->value.dim(2);
  if (w->value.dim(1) != ci || w->value.dim(3) != k || b->value.dim(0) != co)
    throw std::invalid_argument("conv2d: channel mismatch");
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: output would be empty");
  Tensor out({co, oh, ow});
  for (int o = 0; o < co; ++o) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double s = b->value[o];
        for (int i = 0; i < ci; ++i) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            const double* xrow = x->value.data() + (static_cast<int64_t>(i) * h + iy) * wd;
            const double* wrow =
                w->value.data() + ((static_cast<int64_t>(o) * ci + i) * k + ky) * k;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= wd) continue;
              s += wrow[kx] * xrow[ix];
            }
          }
        }
        out[(static_cast<int64_t>(o) * oh + oy) * ow + ox] = s;
      }
    }
  }
  return make_op(std::move(out), {x, w, b}, [ci, h, wd, co, k, stride, pad, oh, ow](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& xv = n.inputs[0]->value;
    const Tensor& wv = n.inputs[1]->value;
    const bool need_x = n.inputs[0]->requires_grad;
    const bool need_w = n.inputs[1]->requires_grad;
    Tensor gx = need_x ? Tensor(xv.shape()) : Tensor();
    Tensor gw = need_w ? Tensor(wv.shape()) : Tensor();
    Tensor gb({co});
    for (int o = 0; o < co; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const double gv = g[(static_cast<int64_t>(o) * oh + oy) * ow + ox];
          gb[o] += gv;
          for (int i = 0; i < ci; ++i) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= wd) continue;
                const int64_t xi = (static_cast<int64_t>(i) * h + iy) * wd + ix;
                const int64_t wi = ((static_cast<int64_t>(o) * ci + i) * k + ky) * k + kx;
                if (need_x) gx[xi] += gv * wv[wi];
                if (need_w) gw[wi] += gv * xv[xi];
              }
            }
          }
        }
      }
    }
    if (need_x) n.inputs[0]->accumulate(gx);
    if (need_w) n.inputs[1]->accumulate(gw);
    if (n.inputs[2]->requires_grad) n.inputs[2]->accumulate(gb);
  });
}

// Same fixed [K,K] kernel applied to every channel, valid positions only.
inline Var depthwise_valid(const Var& x, const Tensor& kernel) {
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  const int kh = kernel.dim(0), kw = kernel.dim(1);
  const int oh = h - kh + 1, ow = w - kw + 1;
  if (oh < 1 || ow < 1) throw std::invalid_argument("depthwise_valid: image smaller than kernel");
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (int ky = 0; ky < kh; ++ky) {
          const double* xrow = x->value.data() + (static_cast<int64_t>(ch) * h + oy + ky) * w + ox;
          const double* krow = kernel.data() + static_cast<int64_t>(ky) * kw;
          for (int kx = 0; kx < kw; ++kx) s += krow[kx] * xrow[kx];
        }
        out[(static_cast<int64_t>(ch) * oh + oy) * ow + ox] = s;
      }
  return make_op(std::move(out), {x}, [kernel, c, h, w, kh, kw, oh, ow](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Tensor gx({c, h, w});
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const double gv = n.grad[(static_cast<int64_t>(ch) * oh + oy) * ow + ox];
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx)
              gx[(static_cast<int64_t>(ch) * h + oy + ky) * w + ox + kx] +=
                  gv * kernel[static_cast<int64_t>(ky) * kw + kx];
        }
    n.inputs[0]->accumulate(gx);
  });
}

// 2x2 stride-2 average pool, ceil output size, averaging in-bounds cells only.
inline Var avg_pool2_same(const Var& x) {
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  const int oh = (h + 1) / 2, ow = (w + 1) / 2;
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        int cnt = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int iy = 2 * oy + dy, ix = 2 * ox + dx;
            if (iy < h && ix < w) {
              s += x->value[(static_cast<int64_t>(ch) * h + iy) * w + ix];
              ++cnt;
            }
          }
        out[(static_cast<int64_t>(ch) * oh + oy) * ow + ox] = s / cnt;
      }
  return make_op(std::move(out), {x}, [c, h, w, oh, ow](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Tensor gx({c, h, w});
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          int cnt = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              if (2 * oy + dy < h && 2 * ox + dx < w) ++cnt;
          const double gv = n.grad[(static_cast<int64_t>(ch) * oh + oy) * ow + ox] / cnt;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int iy = 2 * oy + dy, ix = 2 * ox + dx;
              if (iy < h && ix < w) gx[(static_cast<int64_t>(ch) * h + iy) * w + ix] += gv;
            }
        }
    n.inputs[0]->accumulate(gx);
  });
}

// [4C,H,W] -> [C,2H,2W]; input channel c*4 + dy*2 + dx lands at offset (dy,dx).
inline Var pixel_shuffle2(const Var& x) {
  const int c4 = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  if (c4 % 4 != 0) throw std::invalid_argument("pixel_shuffle2: channels not divisible by 4");
  const int c = c4 / 4;
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int64_t src = (static_cast<int64_t>(ch) * 4 + dy * 2 + dx) * h * w;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            out[(static_cast<int64_t>(ch) * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx] =
                x->value[src + static_cast<int64_t>(y) * w + xx];
      }
  return make_op(std::move(out), {x}, [c, h, w](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Tensor gx({4 * c, h, w});
    for (int ch = 0; ch < c; ++ch)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int64_t dst = (static_cast<int64_t>(ch) * 4 + dy * 2 + dx) * h * w;
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
              gx[dst + static_cast<int64_t>(y) * w + xx] =
                  n.grad[(static_cast<int64_t>(ch) * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx];
        }
    n.inputs[0]->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// Normalization and pooling
// ---------------------------------------------------------------------------

namespace detail {
constexpr double kLnEps = 1e-5;

inline Var layer_norm_impl(const Var& x, const Var* gamma, const Var* beta) {
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  if (gamma && ((*gamma)->value.dim(0) != c || (*beta)->value.dim(0) != c))
    throw std::invalid_argument("layer_norm: channel mismatch");
  const int64_t hw = static_cast<int64_t>(h) * w;
  Tensor xhat({c, h, w});
  Tensor inv_std({h, w});
  for (int64_t p = 0; p < hw; ++p) {
    double m = 0.0;
    for (int i = 0; i < c; ++i) m += x->value[i * hw + p];
    m /= c;
    double v = 0.0;
    for (int i = 0; i < c; ++i) {
      const double d = x->value[i * hw + p] - m;
      v += d * d;
    }
    v /= c;
    const double is = 1.0 / std::sqrt(v + kLnEps);
    inv_std[p] = is;
    for (int i = 0; i < c; ++i) xhat[i * hw + p] = (x->value[i * hw + p] - m) * is;
  }
  Tensor out = xhat;
  if (gamma) {
    for (int i = 0; i < c; ++i)
      for (int64_t p = 0; p < hw; ++p)
        out[i * hw + p] = out[i * hw + p] * (*gamma)->value[i] + (*beta)->value[i];
  }
  std::vector<Var> inputs{x};
  if (gamma) {
    inputs.push_back(*gamma);
    inputs.push_back(*beta);
  }
  const bool has_affine = gamma != nullptr;
  return make_op(std::move(out), std::move(inputs),
                 [xhat, inv_std, c, hw, has_affine](Node& n) {
                   const Tensor& g = n.grad;
                   Tensor gx({n.inputs[0]->value.dim(0), n.inputs[0]->value.dim(1),
                              n.inputs[0]->value.dim(2)});
                   Tensor ggamma, gbeta;
                   const Tensor* gam = has_affine ? &n.inputs[1]->value : nullptr;
                   if (has_affine) {
                     ggamma = Tensor({c});
                     gbeta = Tensor({c});
                   }
                   for (int64_t p = 0; p < hw; ++p) {
                     double mean_gxh = 0.0, mean_gxh_xh = 0.0;
                     for (int i = 0; i < c; ++i) {
                       const double gi = g[i * hw + p];
                       const double gxh = has_affine ? gi * (*gam)[i] : gi;
                       mean_gxh += gxh;
                       mean_gxh_xh += gxh * xhat[i * hw + p];
                       if (has_affine) {
                         ggamma[i] += gi * xhat[i * hw + p];
                         gbeta[i] += gi;
                       }
                     }
                     mean_gxh /= c;
                     mean_gxh_xh /= c;
                     for (int i = 0; i < c; ++i) {
                       const double gi = g[i * hw + p];
                       const double gxh = has_affine ? gi * (*gam)[i] : gi;
                       gx[i * hw + p] =
                           inv_std[p] * (gxh - mean_gxh - xhat[i * hw + p] * mean_gxh_xh);
                     }
                   }
                   n.inputs[0]->accumulate(gx);
                   if (has_affine) {
                     n.inputs[1]->accumulate(ggamma);
                     n.inputs[2]->accumulate(gbeta);
                   }
                 });
}
}  // namespace detail

// Normalizes across channels at each spatial position, with learned scale/shift.
inline Var layer_norm_chan(const Var& x, const Var& gamma, const Var& beta) {
  return detail::layer_norm_impl(x, &gamma, &beta);
}

// Parameter-free channel standardization (unit scale, zero shift).
inline Var standardize_chan(const Var& x) { return detail::layer_norm_impl(x, nullptr, nullptr); }

// [C,H,W] -> [C], max over spatial positions.
inline Var global_max_pool(const Var& x) {
  const int c = x->value.dim(0);
  const int64_t hw = static_cast<int64_t>(x->value.dim(1)) * x->value.dim(2);
  Tensor out({c});
  std::vector<int64_t> argmax(static_cast<size_t>(c));
  for (int i = 0; i < c; ++i) {
    const double* p = x->value.data() + i * hw;
    int64_t best = 0;
    for (int64_t j = 1; j < hw; ++j)
      if (p[j] > p[best]) best = j;
    argmax[static_cast<size_t>(i)] = best;
    out[i] = p[best];
  }
  return make_op(std::move(out), {x}, [argmax, hw, c](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Tensor gx(n.inputs[0]->value.shape());
    for (int i = 0; i < c; ++i) gx[i * hw + argmax[static_cast<size_t>(i)]] = n.grad[i];
    n.inputs[0]->accumulate(gx);
  });
}

// out[c,h,w] = x[c,h,w] * s[c]
inline Var scale_channels(const Var& x, const Var& s) {
  const int c = x->value.dim(0);
  if (s->value.dim(0) != c) throw std::invalid_argument("scale_channels: channel mismatch");
  const int64_t hw = static_cast<int64_t>(x->value.dim(1)) * x->value.dim(2);
  Tensor out = x->value;
  for (int i = 0; i < c; ++i)
    for (int64_t p = 0; p < hw; ++p) out[i * hw + p] *= s->value[i];
  return make_op(std::move(out), {x, s}, [c, hw](Node& n) {
    if (n.inputs[0]->requires_grad) {
      Tensor gx = n.grad;
      for (int i = 0; i < c; ++i)
        for (int64_t p = 0; p < hw; ++p) gx[i * hw + p] *= n.inputs[1]->value[i];
      n.inputs[0]->accumulate(gx);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor gs({c});
      for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        for (int64_t p = 0; p < hw; ++p) acc += n.grad[i * hw + p] * n.inputs[0]->value[i * hw + p];
        gs[i] = acc;
      }
      n.inputs[1]->accumulate(gs);
    }
  });
}

// out[c,h,w] = x[c,h,w] + b[c]
inline Var shift_channels(const Var& x, const Var& b) {
  const int c = x->value.dim(0);
  if (b->value.dim(0) != c) throw std::invalid_argument("shift_channels: channel mismatch");
  const int64_t hw = static_cast<int64_t>(x->value.dim(1)) * x->value.dim(2);
  Tensor out = x->value;
  for (int i = 0; i < c; ++i)
    for (int64_t p = 0; p < hw; ++p) out[i * hw + p] += b->value[i];
  return make_op(std::move(out), {x, b}, [c, hw](Node& n) {
    if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(n.grad);
    if (n.inputs[1]->requires_grad) {
      Tensor gb({c});
      for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        for (int64_t p = 0; p < hw; ++p) acc += n.grad[i * hw + p];
        gb[i] = acc;
      }
      n.inputs[1]->accumulate(gb);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

inline Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty");
  const int h = parts[0]->value.dim(1), w = parts[0]->value.dim(2);
  int ctot = 0;
  for (const Var& p : parts) {
    if (p->value.rank() != 3 || p->value.dim(1) != h || p->value.dim(2) != w)
      throw std::invalid_argument("concat_channels: spatial mismatch");
    ctot += p->value.dim(0);
  }
  Tensor out({ctot, h, w});
  int64_t off = 0;
  for (const Var& p : parts) {
    std::copy(p->value.data(), p->value.data() + p->value.numel(), out.data() + off);
    off += p->value.numel();
  }
  return make_op(std::move(out), parts, [](Node& n) {
    int64_t off = 0;
    for (Var& in : n.inputs) {
      if (in->requires_grad) {
        Tensor g(in->value.shape());
        std::copy(n.grad.data() + off, n.grad.data() + off + in->value.numel(), g.data());
        in->accumulate(g);
      }
      off += in->value.numel();
    }
  });
}

inline Var slice_channels(const Var& x, int c0, int c1) {
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  if (c0 < 0 || c1 > c || c0 >= c1) throw std::invalid_argument("slice_channels: bad range");
  const int64_t hw = static_cast<int64_t>(h) * w;
  Tensor out({c1 - c0, h, w});
  std::copy(x->value.data() + c0 * hw, x->value.data() + c1 * hw, out.data());
  return make_op(std::move(out), {x}, [c0, hw](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Tensor g(n.inputs[0]->value.shape());
    std::copy(n.grad.data(), n.grad.data() + n.grad.numel(), g.data() + c0 * hw);
    n.inputs[0]->accumulate(g);
  });
}

// Map [C,H,W] -> sequence [L,C] following perm (perm[l] = spatial index).
inline Var to_sequence(const Var& x, const std::vector<int>& perm) {
  const int c = x->value.dim(0);
  const int64_t hw = static_cast<int64_t>(x->value.dim(1)) * x->value.dim(2);
  const int l = static_cast<int>(perm.size());
  if (l != hw) throw std::invalid_argument("to_sequence: perm length mismatch");
  Tensor out({l, c});
  for (int t = 0; t < l; ++t)
    for (int i = 0; i < c; ++i) out[static_cast<int64_t>(t) * c + i] = x->value[i * hw + perm[t]];
  return make_op(std::move(out), {x}, [perm, c, hw, l](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Tensor g(n.inputs[0]->value.shape());
    for (int t = 0; t < l; ++t)
      for (int i = 0; i < c; ++i) g[i * hw + perm[t]] += n.grad[static_cast<int64_t>(t) * c + i];
    n.inputs[0]->accumulate(g);
  });
}

// Sequence [L,C] back to map [C,H,W]; inverse of to_sequence with same perm.
inline Var from_sequence(const Var& seq, const std::vector<int>& perm, int h, int w) {
  const int l = seq->value.dim(0), c = seq->value.dim(1);
  const int64_t hw = static_cast<int64_t>(h) * w;
  if (l != hw) throw std::invalid_argument("from_sequence: size mismatch");
  Tensor out({c, h, w});
  for (int t = 0; t < l; ++t)
    for (int i = 0; i < c; ++i) out[i * hw + perm[t]] = seq->value[static_cast<int64_t>(t) * c + i];
  return make_op(std::move(out), {seq}, [perm, c, hw, l](Node& n) {
    if (!n.inputs[0]->requires_grad) return;
    Tensor g({l, c});
    for (int t = 0; t < l; ++t)
      for (int i = 0; i < c; ++i) g[static_cast<int64_t>(t) * c + i] = n.grad[i * hw + perm[t]];
    n.inputs[0]->accumulate(g);
  });
}

}  // namespace cmamba

#endif  // CMAMBA_OPS_HPP
