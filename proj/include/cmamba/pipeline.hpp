#ifndef CMAMBA_PIPELINE_HPP
#define CMAMBA_PIPELINE_HPP

#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cmamba/coder.hpp"
#include "cmamba/entropy.hpp"
#include "cmamba/image.hpp"
#include "cmamba/metrics.hpp"

namespace cmamba {

// ---------------------------------------------------------------------------
// Lambda presets.  Stream header records the preset index (MSE set at 0-5,
// MS-SSIM set at 8-13) or kCustomLambda.
// ---------------------------------------------------------------------------

inline constexpr std::array<double, 6> kLambdaMse = {0.0025, 0.0035, 0.0067,
                                                     0.0130, 0.0250, 0.0500};
inline constexpr std::array<double, 6> kLambdaMsSsim = {3.0, 5.0, 8.0, 16.0, 36.0, 64.0};

inline uint16_t lambda_index_of(double lambda, int metric) {
  const auto& tab = metric == 1 ? kLambdaMsSsim : kLambdaMse;
  for (size_t i = 0; i < tab.size(); ++i)
    if (std::fabs(lambda - tab[i]) <= 1e-9 * std::max(1.0, tab[i]))
      return static_cast<uint16_t>(metric == 1 ? 8 + i : i);
  return kCustomLambda;
}

// ---------------------------------------------------------------------------
// Model: configuration plus every learnable tensor
// ---------------------------------------------------------------------------

struct Model {
  ModelConfig cfg;
  AutoencoderParams ae;
  EntropyParams ep;

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Model m;
    m.cfg = cfg;
    m.ae = AutoencoderParams::init(cfg, rng);
    m.ep = EntropyParams::init(cfg, rng);
    return m;
  }

  std::vector<std::pair<std::string, Var>> named_params() const {
    std::vector<std::pair<std::string, Var>> out;
    ae.named_params("ae", out);
    ep.named_params("ep", out);
    return out;
  }

  std::vector<Var> parameters() const {
    std::vector<Var> out;
    for (auto& [name, p] : named_params()) out.push_back(p);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Shared encode/decode plumbing.  Table construction lives in one place so the
// two sides cannot drift.
// ---------------------------------------------------------------------------

namespace detail {

inline CdfTable prior_table(const FactorizedPrior& p, int c) {
  return build_cdf_logistic(p.loc->value[c], std::exp(p.log_scale->value[c]));
}

inline CdfTable group_table(double mu, double sigma, bool mean_centered) {
  return mean_centered ? build_cdf(0.0, sigma) : build_cdf(mu, sigma);
}

// Entropy-model context: the decoded prefix, or zeros of the same shape when
// the channel-autoregressive path is ablated.
inline std::vector<Var> entropy_context(const std::vector<Var>& decoded, const ModelConfig& cfg) {
  if (!cfg.hyperprior_only) return decoded;
  std::vector<Var> zeroed;
  zeroed.reserve(decoded.size());
  for (const Var& g : decoded) zeroed.push_back(constant(Tensor(g->value.shape())));
  return zeroed;
}

// Fixed-width (S-1)*Mg decoded slot for the residual predictor.
inline Var lrp_slot(const std::vector<Var>& decoded, int h, int w, const ModelConfig& cfg) {
  const int mg = cfg.group_channels();
  const int pad = (cfg.groups - 1 - static_cast<int>(decoded.size())) * mg;
  std::vector<Var> parts = decoded;
  if (pad > 0) parts.push_back(constant(Tensor({pad, h, w})));
  if (parts.empty()) return constant(Tensor({0, h, w}));
  return parts.size() == 1 ? parts[0] : concat_channels(parts);
}

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read failed: " + path);
  return bytes;
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot create " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encode / decode
// ---------------------------------------------------------------------------

struct EncodedImage {
  std::vector<uint8_t> bytes;
  int width = 0, height = 0;  // original, pre-padding
  double bpp = 0.0;           // 8 * bytes / (width * height)
  double estimated_bpp = 0.0;  // model cross-entropy at the coded symbols
};

// Debug tap: the quantized/reconstructed latents each side produced, for
// autoregressive-consistency checks.
struct LatentTrace {
  Tensor zhat;
  std::vector<Tensor> yhat;  // per group, before residual prediction
  std::vector<Tensor> ybar;  // per group, after residual prediction
  std::vector<Tensor> mu, sigma;  // per group, the coder's Gaussian parameters
};

inline EncodedImage encode_image(const Tensor& x, const Model& m, LatentTrace* trace = nullptr) {
  if (x.rank() != 3 || x.dim(0) != 3) throw std::invalid_argument("encode_image: expected [3,H,W]");
  const int hh = x.dim(1), ww = x.dim(2);
  if (hh < 64 || ww < 64) throw std::invalid_argument("encode_image: image smaller than 64x64");
  NoGradGuard ng;
  const ModelConfig& cfg = m.cfg;

  const Var y = analysis_transform(constant(pad_to_multiple(x, 64)), m.ae.ga, cfg);
  const Var z = hyper_encoder(y, m.ae.hy, cfg);

  const int zc = z->value.dim(0), zh = z->value.dim(1), zw = z->value.dim(2);
  Tensor zhat({zc, zh, zw});
  std::vector<uint8_t> z_bytes;
  {
    RangeEncoder enc;
    const int64_t hw = static_cast<int64_t>(zh) * zw;
    for (int c = 0; c < zc; ++c) {
      const CdfTable t = detail::prior_table(m.ep.prior, c);
      for (int64_t j = c * hw; j < (c + 1) * hw; ++j) {
        const int s = t.clamp_symbol(iround_away(z->value[j]));
        enc.encode(t, s);
        zhat[j] = static_cast<double>(s);
      }
    }
    z_bytes = enc.finish();
  }
  const Var zhat_v = constant(zhat);
  double est_bits = estimate_rate(factorized_likelihood(zhat_v, m.ep.prior))->value.item();

  const Var phi = hyper_decoder(zhat_v, m.ae.hy, cfg);
  const std::vector<Var> ygroups = split_groups(y, cfg.groups);
  const int lh = y->value.dim(1), lw = y->value.dim(2);
  const int mg = cfg.group_channels();

  std::vector<Var> decoded;
  std::vector<std::vector<uint8_t>> y_segments;
  for (int i = 1; i <= cfg.groups; ++i) {
    const GaussianParams gp = predict_group_params(phi, detail::entropy_context(decoded, cfg), i,
                                                   m.ep.groups[static_cast<size_t>(i - 1)], cfg);
    const Tensor& yv = ygroups[static_cast<size_t>(i - 1)]->value;
    Tensor yhat({mg, lh, lw});
    RangeEncoder enc;
    for (int64_t j = 0; j < yv.numel(); ++j) {
      const double mu = gp.mu->value[j];
      const CdfTable t = detail::group_table(mu, gp.sigma->value[j], cfg.mean_centered_round);
      const int s = t.clamp_symbol(iround_away(cfg.mean_centered_round ? yv[j] - mu : yv[j]));
      enc.encode(t, s);
      yhat[j] = cfg.mean_centered_round ? s + mu : static_cast<double>(s);
    }
    y_segments.push_back(enc.finish());

    const Var yhat_v = constant(yhat);
    est_bits += estimate_rate(gaussian_likelihood(yhat_v, gp.mu, gp.sigma))->value.item();
    const Var r = latent_residual_predict(phi, detail::lrp_slot(decoded, lh, lw, cfg), yhat_v,
                                          m.ae.lrp[static_cast<size_t>(i - 1)], cfg);
    const Var ybar_i = add(yhat_v, r);
    if (trace) {
      trace->yhat.push_back(yhat);
      trace->ybar.push_back(ybar_i->value);
      trace->mu.push_back(gp.mu->value);
      trace->sigma.push_back(gp.sigma->value);
    }
    decoded.push_back(ybar_i);
  }

  StreamHeader h;
  h.width = static_cast<uint32_t>(ww);
  h.height = static_cast<uint32_t>(hh);
  h.config_id = cfg.config_id();
  h.lambda_index = lambda_index_of(cfg.lambda, cfg.metric);
  h.groups = static_cast<uint16_t>(cfg.groups);

  EncodedImage out;
  out.bytes = serialize_stream(h, z_bytes, y_segments);
  out.width = ww;
  out.height = hh;
  const double pixels = static_cast<double>(hh) * ww;
  out.bpp = 8.0 * static_cast<double>(out.bytes.size()) / pixels;
  out.estimated_bpp = est_bits / pixels;
  if (trace) trace->zhat = zhat;
  return out;
}

inline Tensor decode_image(const std::vector<uint8_t>& bytes, const Model& m,
                           LatentTrace* trace = nullptr) {
  NoGradGuard ng;
  const ParsedStream ps = deserialize_stream(bytes);
  const ModelConfig& cfg = m.cfg;
  if (ps.header.config_id != cfg.config_id() || ps.header.groups != cfg.groups)
    throw FormatError(FormatError::Kind::kBadField,
                      "stream was produced by a different model configuration");
  if (ps.header.width > 32768 || ps.header.height > 32768)
    throw FormatError(FormatError::Kind::kBadField, "implausible image dimensions");
  const int hh = static_cast<int>(ps.header.height), ww = static_cast<int>(ps.header.width);
  const int h64 = (hh + 63) / 64 * 64, w64 = (ww + 63) / 64 * 64;
  const int lh = h64 / 16, lw = w64 / 16;

  Tensor zhat({cfg.hyper_channels, lh / 4, lw / 4});
  {
    RangeDecoder dec(ps.z.data(), ps.z.size());
    const int64_t hw = static_cast<int64_t>(lh / 4) * (lw / 4);
    for (int c = 0; c < cfg.hyper_channels; ++c) {
      const CdfTable t = detail::prior_table(m.ep.prior, c);
      for (int64_t j = c * hw; j < (c + 1) * hw; ++j) zhat[j] = static_cast<double>(dec.decode(t));
    }
  }
  const Var zhat_v = constant(zhat);
  const Var phi = hyper_decoder(zhat_v, m.ae.hy, cfg);
  const int mg = cfg.group_channels();

  std::vector<Var> decoded;
  for (int i = 1; i <= cfg.groups; ++i) {
    const GaussianParams gp = predict_group_params(phi, detail::entropy_context(decoded, cfg), i,
                                                   m.ep.groups[static_cast<size_t>(i - 1)], cfg);
    const auto& seg = ps.y[static_cast<size_t>(i - 1)];
    RangeDecoder dec(seg.data(), seg.size());
    Tensor yhat({mg, lh, lw});
    for (int64_t j = 0; j < yhat.numel(); ++j) {
      const double mu = gp.mu->value[j];
      const CdfTable t = detail::group_table(mu, gp.sigma->value[j], cfg.mean_centered_round);
      const int s = dec.decode(t);
      yhat[j] = cfg.mean_centered_round ? s + mu : static_cast<double>(s);
    }
    const Var yhat_v = constant(yhat);
    const Var r = latent_residual_predict(phi, detail::lrp_slot(decoded, lh, lw, cfg), yhat_v,
                                          m.ae.lrp[static_cast<size_t>(i - 1)], cfg);
    const Var ybar_i = add(yhat_v, r);
    if (trace) {
      trace->yhat.push_back(yhat);
      trace->ybar.push_back(ybar_i->value);
      trace->mu.push_back(gp.mu->value);
      trace->sigma.push_back(gp.sigma->value);
    }
    decoded.push_back(ybar_i);
  }
  if (trace) trace->zhat = zhat;

  const Var xhat = synthesis_transform(merge_groups(decoded), m.ae.gs, cfg, /*clamp_output=*/true);
  return crop_top_left(xhat->value, hh, ww);
}

// ---------------------------------------------------------------------------
// RD objective
// ---------------------------------------------------------------------------

// L = R_y + R_z + lambda * D.  Rates are passed in whatever normalization the
// caller uses (training passes bits per pixel); D is 255^2 * MSE or 1 - MS-SSIM.
inline Var rd_loss(const Var& x, const Var& xhat, const Var& rate_y, const Var& rate_z,
                   double lambda, int metric) {
  if (rate_y->value.item() < 0.0 || rate_z->value.item() < 0.0)
    throw std::invalid_argument("rd_loss: rates must be >= 0");
  check_same_shape(x, xhat, "rd_loss");
  Var d;
  if (metric == 1) {
    d = one_minus(ms_ssim(x, xhat));
  } else {
    const Var e = sub(x, xhat);
    d = mul_scalar(mean_all(mul(e, e)), 255.0 * 255.0);
  }
  return add(add(rate_y, rate_z), mul_scalar(d, lambda));
}

// Quantization surrogate on the distortion/context path; the rate path always
// sees additive uniform noise.
enum class QuantMode { kSte, kNoise };

struct QuantNoise {
  Tensor y_noise;  // [M, lh, lw]
  Tensor z_noise;  // [hyper, lh/4, lw/4]

  static QuantNoise draw(const ModelConfig& cfg, int lh, int lw, Rng& rng) {
    QuantNoise n;
    n.y_noise = rng.uniform_tensor({cfg.latent_channels, lh, lw}, -0.5, 0.5);
    n.z_noise = rng.uniform_tensor({cfg.hyper_channels, lh / 4, lw / 4}, -0.5, 0.5);
    return n;
  }
};

struct RdStats {
  Var loss, rate_y, rate_z, distortion;  // rates in bits per pixel
};

// One training observation: full forward pass with surrogate quantization.
// x is a [3,H,W] crop with H, W multiples of 64.
inline RdStats training_objective(const Model& m, const Tensor& x, const QuantNoise& noise,
                                  QuantMode mode = QuantMode::kSte) {
  const ModelConfig& cfg = m.cfg;
  const Var xv = constant(x);
  const Var y = analysis_transform(xv, m.ae.ga, cfg);
  const Var z = hyper_encoder(y, m.ae.hy, cfg);
  if (!noise.y_noise.same_shape(y->value) || !noise.z_noise.same_shape(z->value))
    throw std::invalid_argument("training_objective: noise shape mismatch");

  const Var z_rate = add(z, constant(noise.z_noise));
  const Var z_ctx = mode == QuantMode::kSte ? ste_round(z) : z_rate;
  const Var rate_z = estimate_rate(factorized_likelihood(z_rate, m.ep.prior));

  const Var phi = hyper_decoder(z_ctx, m.ae.hy, cfg);
  const std::vector<Var> ygroups = split_groups(y, cfg.groups);
  const std::vector<Var> ynoise = split_groups(constant(noise.y_noise), cfg.groups);
  const int lh = y->value.dim(1), lw = y->value.dim(2);

  Var rate_y;
  std::vector<Var> decoded;
  for (int i = 1; i <= cfg.groups; ++i) {
    const size_t gi = static_cast<size_t>(i - 1);
    const GaussianParams gp =
        predict_group_params(phi, detail::entropy_context(decoded, cfg), i, m.ep.groups[gi], cfg);
    const Var y_rate = add(ygroups[gi], ynoise[gi]);
    const Var bits = estimate_rate(gaussian_likelihood(y_rate, gp.mu, gp.sigma));
    rate_y = rate_y ? add(rate_y, bits) : bits;

    Var yhat_i;
    if (mode == QuantMode::kSte) {
      yhat_i = cfg.mean_centered_round ? add(ste_round(sub(ygroups[gi], gp.mu)), gp.mu)
                                       : ste_round(ygroups[gi]);
    } else {
      yhat_i = y_rate;
    }
    const Var r =
        latent_residual_predict(phi, detail::lrp_slot(decoded, lh, lw, cfg), yhat_i, m.ae.lrp[gi], cfg);
    decoded.push_back(add(yhat_i, r));
  }

  const Var xhat = synthesis_transform(merge_groups(decoded), m.ae.gs, cfg, /*clamp_output=*/false);
  const double pixels = static_cast<double>(x.dim(1)) * x.dim(2);
  RdStats s;
  s.rate_y = mul_scalar(rate_y, 1.0 / pixels);
  s.rate_z = mul_scalar(rate_z, 1.0 / pixels);
  s.loss = rd_loss(xv, xhat, s.rate_y, s.rate_z, cfg.lambda, cfg.metric);
  if (cfg.metric == 1) {
    s.distortion = one_minus(ms_ssim(xv, xhat));
  } else {
    const Var e = sub(xv, xhat);
    s.distortion = mul_scalar(mean_all(mul(e, e)), 255.0 * 255.0);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct Adam {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<Tensor> m1, m2;

  explicit Adam(const std::vector<Var>& params, double lr_) : lr(lr_) {
    for (const Var& p : params) {
      m1.emplace_back(p->value.shape());
      m2.emplace_back(p->value.shape());
    }
  }

  void step(const std::vector<Var>& params) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& v = params[i]->value;
      const Tensor& g = params[i]->grad;
      if (g.numel() == 0) continue;
      for (int64_t j = 0; j < v.numel(); ++j) {
        m1[i][j] = beta1 * m1[i][j] + (1.0 - beta1) * g[j];
        m2[i][j] = beta2 * m2[i][j] + (1.0 - beta2) * g[j] * g[j];
        v[j] -= lr * (m1[i][j] / bc1) / (std::sqrt(m2[i][j] / bc2) + eps);
      }
    }
  }
};

inline double global_grad_norm(const std::vector<Var>& params) {
  double sq = 0.0;
  for (const Var& p : params)
    for (int64_t j = 0; j < p->grad.numel(); ++j) sq += p->grad[j] * p->grad[j];
  return std::sqrt(sq);
}

inline void clip_gradients(const std::vector<Var>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const double sc = max_norm / norm;
  for (const Var& p : params)
    for (int64_t j = 0; j < p->grad.numel(); ++j) p->grad[j] *= sc;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lambda = 0.013;
  int metric = 0;  // 0 = MSE, 1 = MS-SSIM
  int steps = 200;  // optimizer steps; 0 = derive from epochs
  int epochs = 0;
  int batch_size = 8;
  int crop = 256;
  double lr = 1e-4;
  double lr_final = 0.0;  // > 0: linear decay from lr to lr_final
  double clip_norm = 1.0;
  std::string dataset_dir;
  std::string loss_log;  // CSV path; empty = keep in memory only
  uint64_t seed = 1;

  // The published schedule: 50 epochs of 8x256x256 batches at 1e-4 (the 512-crop
  // fine-tuning stage is not reproduced).
  static TrainConfig paper_schedule() {
    TrainConfig t;
    t.steps = 0;
    t.epochs = 50;
    t.batch_size = 8;
    t.crop = 256;
    t.lr = 1e-4;
    return t;
  }

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda))
      throw std::invalid_argument("train: lambda must be positive");
    if (metric != 0 && metric != 1) throw std::invalid_argument("train: unknown metric");
    if (crop < 64 || crop % 64 != 0)
      throw std::invalid_argument("train: crop must be a positive multiple of 64");
    if (metric == 1 && crop < 192)
      throw std::invalid_argument("train: MS-SSIM needs crops of at least 192");
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
    if (steps < 0 || epochs < 0 || (steps == 0 && epochs == 0))
      throw std::invalid_argument("train: need a positive step or epoch budget");
    if (lr <= 0.0) throw std::invalid_argument("train: learning rate must be positive");
  }
};

struct TrainLogRow {
  int step = 0;
  double rate_bpp = 0.0, distortion = 0.0, loss = 0.0;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
};

namespace detail {

inline std::vector<Tensor> load_dataset(const std::string& dir, int min_hw) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("train: dataset directory not found: " + dir);
  std::vector<std::string> paths;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".png" || ext == ".ppm") paths.push_back(e.path().string());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<Tensor> images;
  for (const std::string& p : paths) {
    Tensor img = load_image(p);
    if (img.dim(1) >= min_hw && img.dim(2) >= min_hw) images.push_back(std::move(img));
  }
  if (images.empty()) throw IoError("train: no usable images (>= crop size) in " + dir);
  return images;
}

inline Tensor crop_at(const Tensor& img, int y0, int x0, int size) {
  const int c = img.dim(0), w = img.dim(2);
  Tensor out({c, size, size});
  for (int ch = 0; ch < c; ++ch)
    for (int yy = 0; yy < size; ++yy) {
      const double* src = img.data() + (static_cast<int64_t>(ch) * img.dim(1) + y0 + yy) * w + x0;
      std::copy(src, src + size, out.data() + (static_cast<int64_t>(ch) * size + yy) * size);
    }
  return out;
}

}  // namespace detail

inline TrainResult train(Model& m, const TrainConfig& tc) {
  tc.validate();
  m.cfg.lambda = tc.lambda;
  m.cfg.metric = tc.metric;
  const std::vector<Tensor> images = detail::load_dataset(tc.dataset_dir, tc.crop);
  const std::vector<Var> params = m.parameters();
  Adam opt(params, tc.lr);
  Rng rng(tc.seed);

  const int spe = std::max<int>(1, static_cast<int>(images.size()) / tc.batch_size);
  const int total = tc.steps > 0 ? tc.steps : tc.epochs * spe;

  TrainResult res;
  res.log.reserve(static_cast<size_t>(total));
  for (int step = 0; step < total; ++step) {
    for (const Var& p : params) p->zero_grad();
    double bpp = 0.0, dist = 0.0, loss = 0.0;
    for (int b = 0; b < tc.batch_size; ++b) {
      const Tensor& img = images[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int>(images.size()) - 1))];
      const int y0 = rng.uniform_int(0, img.dim(1) - tc.crop);
      const int x0 = rng.uniform_int(0, img.dim(2) - tc.crop);
      const Tensor crop = detail::crop_at(img, y0, x0, tc.crop);
      const QuantNoise noise = QuantNoise::draw(m.cfg, tc.crop / 16, tc.crop / 16, rng);
      RdStats s = training_objective(m, crop, noise, QuantMode::kSte);
      backward(mul_scalar(s.loss, 1.0 / tc.batch_size));
      bpp += (s.rate_y->value.item() + s.rate_z->value.item()) / tc.batch_size;
      dist += s.distortion->value.item() / tc.batch_size;
      loss += s.loss->value.item() / tc.batch_size;
    }
    if (!std::isfinite(loss))
      throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                         " (bpp=" + std::to_string(bpp) + ", distortion=" + std::to_string(dist) + ")");
    clip_gradients(params, tc.clip_norm);
    if (tc.lr_final > 0.0 && total > 1)
      opt.lr = tc.lr + (tc.lr_final - tc.lr) * step / (total - 1);
    opt.step(params);
    res.log.push_back({step, bpp, dist, loss});
  }

  if (!tc.loss_log.empty()) {
    std::ofstream f(tc.loss_log, std::ios::trunc);
    if (!f) throw IoError("train: cannot write loss log " + tc.loss_log);
    f << "step,rate_bpp,distortion,loss\n";
    for (const TrainLogRow& r : res.log)
      f << r.step << "," << r.rate_bpp << "," << r.distortion << "," << r.loss << "\n";
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "CMCK", version, config block, then named tensors.
// ---------------------------------------------------------------------------

inline constexpr uint16_t kCheckpointVersion = 1;

namespace detail {

inline void put_f64(std::vector<uint8_t>& b, double v) {
  put_u64(b, std::bit_cast<uint64_t>(v));
}

}  // namespace detail

inline std::vector<uint8_t> serialize_checkpoint(const Model& m) {
  std::vector<uint8_t> out;
  out.insert(out.end(), {'C', 'M', 'C', 'K'});
  detail::put_u16(out, kCheckpointVersion);
  detail::put_u16(out, 0);  // reserved
  const ModelConfig& c = m.cfg;
  for (int w : c.widths) detail::put_u32(out, static_cast<uint32_t>(w));
  detail::put_u32(out, static_cast<uint32_t>(c.latent_channels));
  detail::put_u32(out, static_cast<uint32_t>(c.hyper_channels));
  detail::put_u32(out, static_cast<uint32_t>(c.blocks_per_stage));
  detail::put_u32(out, static_cast<uint32_t>(c.groups));
  detail::put_u32(out, static_cast<uint32_t>(c.n_state));
  detail::put_f64(out, c.lambda);
  detail::put_u32(out, static_cast<uint32_t>(c.metric));
  detail::put_u32(out, static_cast<uint32_t>(c.block_mode));
  detail::put_u32(out, static_cast<uint32_t>(c.fusion_mode));
  out.push_back(c.mean_centered_round ? 1 : 0);
  out.push_back(c.hyperprior_only ? 1 : 0);
  detail::put_u64(out, c.config_id());

  const auto np = m.named_params();
  detail::put_u32(out, static_cast<uint32_t>(np.size()));
  for (const auto& [name, p] : np) {
    detail::put_u16(out, static_cast<uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<uint8_t>(p->value.rank()));
    for (int d = 0; d < p->value.rank(); ++d)
      detail::put_u32(out, static_cast<uint32_t>(p->value.dim(d)));
    for (int64_t j = 0; j < p->value.numel(); ++j) detail::put_f64(out, p->value[j]);
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const Model& m) {
  detail::write_file(path, serialize_checkpoint(m));
}

inline Model deserialize_checkpoint(const std::vector<uint8_t>& bytes,
                                    const ModelConfig* expect = nullptr) {
  detail::ByteReader r{bytes.data(), bytes.size()};
  r.need(4);
  if (!(bytes[0] == 'C' && bytes[1] == 'M' && bytes[2] == 'C' && bytes[3] == 'K'))
    throw FormatError(FormatError::Kind::kBadMagic, "checkpoint: bad magic (want CMCK)");
  r.pos = 4;
  const uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError(FormatError::Kind::kBadVersion,
                      "checkpoint: unsupported version " + std::to_string(version));
  if (r.u16() != 0)
    throw FormatError(FormatError::Kind::kBadField, "checkpoint: reserved field not zero");

  ModelConfig cfg;
  for (int i = 0; i < 4; ++i) cfg.widths[static_cast<size_t>(i)] = static_cast<int>(r.u32());
  cfg.latent_channels = static_cast<int>(r.u32());
  cfg.hyper_channels = static_cast<int>(r.u32());
  cfg.blocks_per_stage = static_cast<int>(r.u32());
  cfg.groups = static_cast<int>(r.u32());
  cfg.n_state = static_cast<int>(r.u32());
  cfg.lambda = std::bit_cast<double>(r.u64());
  cfg.metric = static_cast<int>(r.u32());
  const uint32_t bm = r.u32(), fm = r.u32();
  if (bm > 2 || fm > 1)
    throw FormatError(FormatError::Kind::kBadField, "checkpoint: unknown ablation mode");
  cfg.block_mode = static_cast<BlockMode>(bm);
  cfg.fusion_mode = static_cast<FusionMode>(fm);
  r.need(2);
  cfg.mean_centered_round = bytes[r.pos++] != 0;
  cfg.hyperprior_only = bytes[r.pos++] != 0;
  const uint64_t stored_id = r.u64();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(FormatError::Kind::kBadField, std::string("checkpoint: ") + e.what());
  }
  if (stored_id != cfg.config_id())
    throw FormatError(FormatError::Kind::kBadField, "checkpoint: config hash mismatch");
  if (expect && expect->config_id() != cfg.config_id())
    throw FormatError(FormatError::Kind::kBadField,
                      "checkpoint built for a different configuration");

  Model m = Model::init(cfg, 0);
  std::map<std::string, Var> by_name;
  for (auto& [name, p] : m.named_params()) by_name.emplace(name, p);
  const uint32_t count = r.u32();
  if (count != by_name.size())
    throw FormatError(FormatError::Kind::kBadField, "checkpoint: parameter count mismatch");
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t len = r.u16();
    r.need(len);
    const std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), len);
    r.pos += len;
    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw FormatError(FormatError::Kind::kBadField, "checkpoint: unknown parameter " + name);
    r.need(1);
    const int rank = bytes[r.pos++];
    std::vector<int> dims;
    for (int d = 0; d < rank; ++d) dims.push_back(static_cast<int>(r.u32()));
    Tensor& dst = it->second->value;
    if (dims != dst.shape())
      throw FormatError(FormatError::Kind::kBadField, "checkpoint: shape mismatch for " + name);
    for (int64_t j = 0; j < dst.numel(); ++j) dst[j] = std::bit_cast<double>(r.u64());
    by_name.erase(it);  // each name may appear once
  }
  if (!by_name.empty())
    throw FormatError(FormatError::Kind::kBadField, "checkpoint: missing parameters");
  if (r.pos != bytes.size())
    throw FormatError(FormatError::Kind::kBadField, "checkpoint: trailing bytes");
  return m;
}

inline Model load_checkpoint(const std::string& path, const ModelConfig* expect = nullptr) {
  return deserialize_checkpoint(detail::read_file(path), expect);
}

}  // namespace cmamba

#endif  // CMAMBA_PIPELINE_HPP
