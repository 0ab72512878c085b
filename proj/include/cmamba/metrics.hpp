#ifndef CMAMBA_METRICS_HPP
#define CMAMBA_METRICS_HPP

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "cmamba/errors.hpp"
#include "cmamba/ops.hpp"

namespace cmamba {

inline constexpr double kDbCap = 100.0;

// ---------------------------------------------------------------------------
// PSNR (8-bit scale) on [0,1] images
// ---------------------------------------------------------------------------

inline double psnr(const Tensor& x, const Tensor& xhat) {
  if (!x.same_shape(xhat)) throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = (x[i] - xhat[i]) * 255.0;
    mse += d * d;
  }
  mse /= static_cast<double>(x.numel());
  if (mse <= 0.0) return kDbCap;
  return std::min(kDbCap, 20.0 * std::log10(255.0) - 10.0 * std::log10(mse));
}

// ---------------------------------------------------------------------------
// MS-SSIM (5 scales, 11x11 gaussian sigma=1.5, k1=0.01, k2=0.03 on [0,1])
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor gaussian_window(int size, double sigma) {
  Tensor g1({size});
  double sum = 0.0;
  const double mid = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) {
    g1[i] = std::exp(-(i - mid) * (i - mid) / (2.0 * sigma * sigma));
    sum += g1[i];
  }
  Tensor k({size, size});
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) k[static_cast<int64_t>(i) * size + j] = g1[i] * g1[j] / (sum * sum);
  return k;
}

// Per-channel spatial means of luminance*cs and cs at one scale.
struct SsimScale {
  std::vector<Var> ssim;  // one scalar per channel
  std::vector<Var> cs;
};

inline SsimScale ssim_per_channel(const Var& a, const Var& b, const Tensor& win) {
  const int c = a->value.dim(0);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Var mu_a = depthwise_valid(a, win);
  const Var mu_b = depthwise_valid(b, win);
  const Var aa = depthwise_valid(mul(a, a), win);
  const Var bb = depthwise_valid(mul(b, b), win);
  const Var ab = depthwise_valid(mul(a, b), win);
  const Var num0 = mul_scalar(mul(mu_a, mu_b), 2.0);
  const Var den0 = add(mul(mu_a, mu_a), mul(mu_b, mu_b));
  const Var lum = div(add_scalar(num0, c1), add_scalar(den0, c1));
  const Var num1 = sub(mul_scalar(ab, 2.0), num0);
  const Var den1 = sub(add(aa, bb), den0);
  const Var cs = div(add_scalar(num1, c2), add_scalar(den1, c2));
  const Var lum_cs = mul(lum, cs);
  SsimScale out;
  for (int i = 0; i < c; ++i) {
    out.ssim.push_back(mean_all(slice_channels(lum_cs, i, i + 1)));
    out.cs.push_back(mean_all(slice_channels(cs, i, i + 1)));
  }
  return out;
}

}  // namespace detail

// Differentiable 5-scale MS-SSIM over [3,H,W] (or [C,H,W]) pairs in [0,1].
inline Var ms_ssim(const Var& x, const Var& xhat) {
  check_same_shape(x, xhat, "ms_ssim");
  if (x->value.rank() != 3) throw std::invalid_argument("ms_ssim: expected [C,H,W]");
  if (x->value.dim(1) < 176 || x->value.dim(2) < 176)
    throw std::invalid_argument("ms_ssim: needs at least 176x176 input for 5 scales");
  static const Tensor win = detail::gaussian_window(11, 1.5);
  static const double weights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  const int c = x->value.dim(0);
  std::vector<Var> per_channel(static_cast<size_t>(c));
  Var a = x, b = xhat;
  for (int scale = 0; scale < 5; ++scale) {
    if (scale > 0) {
      a = avg_pool2_same(a);
      b = avg_pool2_same(b);
    }
    detail::SsimScale s = detail::ssim_per_channel(a, b, win);
    for (int i = 0; i < c; ++i) {
      const Var term = pow_const(relu(scale == 4 ? s.ssim[static_cast<size_t>(i)]
                                                 : s.cs[static_cast<size_t>(i)]),
                                 weights[scale]);
      per_channel[static_cast<size_t>(i)] =
          scale == 0 ? term : mul(per_channel[static_cast<size_t>(i)], term);
    }
  }
  Var total = per_channel[0];
  for (int i = 1; i < c; ++i) total = add(total, per_channel[static_cast<size_t>(i)]);
  return mul_scalar(total, 1.0 / static_cast<double>(c));
}

inline double ms_ssim_value(const Tensor& x, const Tensor& xhat) {
  NoGradGuard ng;
  return ms_ssim(constant(x), constant(xhat))->value.item();
}

inline double msssim_to_db(double v) {
  if (v >= 1.0) return kDbCap;
  return std::min(kDbCap, -10.0 * std::log10(1.0 - v));
}

inline double ms_ssim_db(const Tensor& x, const Tensor& xhat) {
  return msssim_to_db(ms_ssim_value(x, xhat));
}

// ---------------------------------------------------------------------------
// BD-Rate: monotone piecewise-cubic (PCHIP) interpolation of log10(rate) as a
// function of quality, integrated analytically over the shared quality range.
// ---------------------------------------------------------------------------

struct RdPoint {
  double bpp;
  double quality;  // dB
};

struct Pchip {
  std::vector<double> xs, ys, ms;

  Pchip(std::vector<double> x, std::vector<double> y) : xs(std::move(x)), ys(std::move(y)) {
    const size_t n = xs.size();
    if (n < 2) throw std::invalid_argument("pchip: need at least two points");
    for (size_t i = 1; i < n; ++i)
      if (xs[i] <= xs[i - 1]) throw std::invalid_argument("pchip: x must be strictly increasing");
    std::vector<double> h(n - 1), d(n - 1);
    for (size_t i = 0; i + 1 < n; ++i) {
      h[i] = xs[i + 1] - xs[i];
      d[i] = (ys[i + 1] - ys[i]) / h[i];
    }
    ms.assign(n, 0.0);
    for (size_t i = 1; i + 1 < n; ++i) {
      if (d[i - 1] * d[i] > 0.0) {
        const double w1 = 2.0 * h[i] + h[i - 1];
        const double w2 = h[i] + 2.0 * h[i - 1];
        ms[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
      }
    }
    auto endpoint = [](double h0, double h1, double d0, double d1) {
      double m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
      if (m * d0 <= 0.0) return 0.0;
      if (d0 * d1 < 0.0 && std::fabs(m) > 3.0 * std::fabs(d0)) return 3.0 * d0;
      return m;
    };
    if (n == 2) {
      ms[0] = ms[1] = d[0];
    } else {
      ms[0] = endpoint(h[0], h[1], d[0], d[1]);
      ms[n - 1] = endpoint(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    }
  }

  double eval(double x) const {
    const size_t i = segment(x);
    const double h = xs[i + 1] - xs[i];
    const double s = (x - xs[i]) / h;
    const double s2 = s * s, s3 = s2 * s;
    return (2.0 * s3 - 3.0 * s2 + 1.0) * ys[i] + (s3 - 2.0 * s2 + s) * h * ms[i] +
           (-2.0 * s3 + 3.0 * s2) * ys[i + 1] + (s3 - s2) * h * ms[i + 1];
  }

  // exact integral over [a,b] within the knot range
  double integrate(double a, double b) const {
    if (a > b) return -integrate(b, a);
    double total = 0.0;
    for (size_t i = 0; i + 1 < xs.size(); ++i) {
      const double lo = std::max(a, xs[i]);
      const double hi = std::min(b, xs[i + 1]);
      if (lo >= hi) continue;
      const double h = xs[i + 1] - xs[i];
      auto basis = [h, this, i](double s) {
        const double s2 = s * s, s3 = s2 * s, s4 = s3 * s;
        return (0.5 * s4 - s3 + s) * ys[i] + (0.25 * s4 - 2.0 * s3 / 3.0 + 0.5 * s2) * h * ms[i] +
               (-0.5 * s4 + s3) * ys[i + 1] + (0.25 * s4 - s3 / 3.0) * h * ms[i + 1];
      };
      total += h * (basis((hi - xs[i]) / h) - basis((lo - xs[i]) / h));
    }
    return total;
  }

 private:
  size_t segment(double x) const {
    if (x <= xs.front()) return 0;
    if (x >= xs.back()) return xs.size() - 2;
    const auto it = std::upper_bound(xs.begin(), xs.end(), x);
    return static_cast<size_t>(it - xs.begin()) - 1;
  }
};

inline double bd_rate(const std::vector<RdPoint>& anchor, const std::vector<RdPoint>& test) {
  auto validate = [](const std::vector<RdPoint>& c, const char* which) {
    if (c.size() < 4) throw std::invalid_argument(std::string("bd_rate: need >= 4 points in ") + which);
    for (size_t i = 0; i < c.size(); ++i) {
      if (c[i].bpp <= 0.0) throw std::invalid_argument("bd_rate: rates must be positive");
      if (i > 0 && c[i].bpp <= c[i - 1].bpp)
        throw std::invalid_argument("bd_rate: rates must be strictly increasing");
    }
  };
  validate(anchor, "anchor");
  validate(test, "test");
  auto curve = [](const std::vector<RdPoint>& c) {
    std::vector<double> q, lr;
    for (const RdPoint& p : c) {
      q.push_back(p.quality);
      lr.push_back(std::log10(p.bpp));
    }
    return Pchip(q, lr);
  };
  const Pchip pa = curve(anchor);
  const Pchip pt = curve(test);
  const double lo = std::max(pa.xs.front(), pt.xs.front());
  const double hi = std::min(pa.xs.back(), pt.xs.back());
  if (hi <= lo) throw std::invalid_argument("bd_rate: quality ranges do not overlap");
  const double avg_diff = (pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo);
  return (std::pow(10.0, avg_diff) - 1.0) * 100.0;
}

// ---------------------------------------------------------------------------
// Fourier delta-log-amplitude probe
// ---------------------------------------------------------------------------

// log|A| at DC minus log|A| at the Nyquist corner (the half-diagonal endpoint
// of the 2D spectrum), averaged over channels.  Positive = low-pass behavior.
inline double spectrum_delta(const Tensor& features) {
  if (features.rank() != 3) throw std::invalid_argument("spectrum_delta: expected [C,H,W]");
  const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
  if (h < 8 || w < 8) throw std::invalid_argument("spectrum_delta: map too small");
  constexpr double eps = 1e-8;
  const int wc = w / 2 + 1;
  std::vector<double> in(static_cast<size_t>(h) * w);
  std::vector<fftw_complex> out(static_cast<size_t>(h) * wc);
  fftw_plan plan = fftw_plan_dft_r2c_2d(h, w, in.data(), out.data(), FFTW_ESTIMATE);
  double delta = 0.0;
  for (int i = 0; i < c; ++i) {
    const double* src = features.data() + static_cast<int64_t>(i) * h * w;
    std::copy(src, src + static_cast<int64_t>(h) * w, in.begin());
    fftw_execute(plan);
    auto amp = [&](int y, int x) {
      const fftw_complex& v = out[static_cast<size_t>(y) * wc + x];
      return std::hypot(v[0], v[1]);
    };
    delta += std::log(std::max(amp(0, 0), eps)) - std::log(std::max(amp(h / 2, w / 2), eps));
  }
  fftw_destroy_plan(plan);
  return delta / static_cast<double>(c);
}

// ---------------------------------------------------------------------------
// Latent spatial-correlation map
// ---------------------------------------------------------------------------

// Normalized cross-correlation of z=(y-mu)/sigma between positions offset by
// (dy,dx), |dy|,|dx| <= K, pooled over channels.  Output [(2K+1),(2K+1)],
// center cell = offset (0,0) = 1.
inline Tensor correlation_map(const Tensor& y, const Tensor& mu, const Tensor& sigma, int k) {
  if (!y.same_shape(mu) || !y.same_shape(sigma))
    throw std::invalid_argument("correlation_map: shape mismatch");
  if (y.rank() != 3) throw std::invalid_argument("correlation_map: expected [C,H,W]");
  if (k < 0 || k >= y.dim(1) || k >= y.dim(2))
    throw std::invalid_argument("correlation_map: offset radius too large");
  const int c = y.dim(0), h = y.dim(1), w = y.dim(2);
  Tensor z(y.shape());
  for (int64_t i = 0; i < y.numel(); ++i) {
    if (sigma[i] <= 0.0) throw std::invalid_argument("correlation_map: sigma must be positive");
    z[i] = (y[i] - mu[i]) / sigma[i];
  }
  Tensor out({2 * k + 1, 2 * k + 1});
  const int64_t hw = static_cast<int64_t>(h) * w;
  for (int dy = -k; dy <= k; ++dy)
    for (int dx = -k; dx <= k; ++dx) {
      double num = 0.0, den_a = 0.0, den_b = 0.0;
      for (int i = 0; i < c; ++i) {
        const double* zc = z.data() + i * hw;
        for (int yy = std::max(0, -dy); yy < h - std::max(0, dy); ++yy)
          for (int xx = std::max(0, -dx); xx < w - std::max(0, dx); ++xx) {
            const double a = zc[static_cast<int64_t>(yy) * w + xx];
            const double b = zc[static_cast<int64_t>(yy + dy) * w + (xx + dx)];
            num += a * b;
            den_a += a * a;
            den_b += b * b;
          }
      }
      const double den = std::sqrt(den_a * den_b);
      double r = den > 0.0 ? std::clamp(num / den, -1.0, 1.0) : 0.0;
      if (dy == 0 && dx == 0 && den > 0.0) r = 1.0;  // identical series by construction
      out[static_cast<int64_t>(dy + k) * (2 * k + 1) + (dx + k)] = r;
    }
  return out;
}

}  // namespace cmamba

#endif  // CMAMBA_METRICS_HPP
