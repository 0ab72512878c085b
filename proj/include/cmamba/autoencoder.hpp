#ifndef CMAMBA_AUTOENCODER_HPP
#define CMAMBA_AUTOENCODER_HPP

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmamba/ca_ssm.hpp"

namespace cmamba {

// ---------------------------------------------------------------------------
// Model configuration.  Four stride-2 stages fix the 16x latent downsample;
// the hyper path adds another 4x (64x total for z).
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::array<int, 4> widths = {32, 48, 64, 96};  // per-stage channels
  int latent_channels = 96;                      // M
  int hyper_channels = 64;
  int blocks_per_stage = 1;
  int groups = 4;   // S
  int n_state = 4;  // N
  double lambda = 0.013;
  int metric = 0;  // 0 = MSE, 1 = MS-SSIM

  // ablation hooks
  BlockMode block_mode = BlockMode::kHybrid;
  FusionMode fusion_mode = FusionMode::kDynamic;
  bool mean_centered_round = false;  // code round(y - mu) + mu instead of round(y)
  bool hyperprior_only = false;      // drop the autoregressive context ("w/o CAR")

  void validate() const {
    for (int w : widths)
      if (w < 1) throw std::invalid_argument("config: stage widths must be >= 1");
    if (latent_channels < 1 || hyper_channels < 1 || blocks_per_stage < 1 || groups < 1 ||
        n_state < 1)
      throw std::invalid_argument("config: all counts must be >= 1");
    if (latent_channels % groups != 0)
      throw std::invalid_argument("config: latent channels must be divisible by group count");
    if (!(lambda > 0.0) || !std::isfinite(lambda))
      throw std::invalid_argument("config: lambda must be positive");
    if (metric != 0 && metric != 1) throw std::invalid_argument("config: unknown metric");
  }

  int group_channels() const { return latent_channels / groups; }

  uint64_t config_id() const {
    std::string s = "cmamba1;";
    for (int w : widths) s += std::to_string(w) + ",";
    s += ";M=" + std::to_string(latent_channels) + ";Hy=" + std::to_string(hyper_channels) +
         ";B=" + std::to_string(blocks_per_stage) + ";S=" + std::to_string(groups) +
         ";N=" + std::to_string(n_state) + ";bm=" + std::to_string(static_cast<int>(block_mode)) +
         ";fm=" + std::to_string(static_cast<int>(fusion_mode)) +
         ";mc=" + std::to_string(mean_centered_round ? 1 : 0) +
         ";hp=" + std::to_string(hyperprior_only ? 1 : 0);
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

// ---------------------------------------------------------------------------
// Convolution parameter bundle
// ---------------------------------------------------------------------------

struct ConvP {
  Var w, b;

  static ConvP init(int co, int ci, int k, Rng& rng, bool zero = false) {
    ConvP p;
    const double sc = 1.0 / std::sqrt(static_cast<double>(k) * k * ci);
    p.w = make_param(zero ? Tensor({co, ci, k, k}) : rng.gaussian_tensor({co, ci, k, k}, sc));
    p.b = make_param(Tensor({co}));
    return p;
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    out.emplace_back(px + ".w", w);
    out.emplace_back(px + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// Transform parameter bundles
// ---------------------------------------------------------------------------

struct GaParams {
  std::array<ConvP, 4> down;                       // stride-2, widths[i] out
  std::array<std::vector<CaSsmParams>, 4> blocks;  // blocks_per_stage each
  ConvP head;                                      // widths[3] -> M

  static GaParams init(const ModelConfig& cfg, Rng& rng) {
    GaParams p;
    int in_ch = 3;
    for (int s = 0; s < 4; ++s) {
      p.down[static_cast<size_t>(s)] = ConvP::init(cfg.widths[static_cast<size_t>(s)], in_ch, 3, rng);
      in_ch = cfg.widths[static_cast<size_t>(s)];
      for (int b = 0; b < cfg.blocks_per_stage; ++b)
        p.blocks[static_cast<size_t>(s)].push_back(CaSsmParams::init(in_ch, cfg.n_state, rng));
    }
    p.head = ConvP::init(cfg.latent_channels, in_ch, 3, rng);
    return p;
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    for (size_t s = 0; s < 4; ++s) {
      down[s].named_params(px + ".down" + std::to_string(s), out);
      for (size_t b = 0; b < blocks[s].size(); ++b)
        blocks[s][b].named_params(px + ".s" + std::to_string(s) + ".blk" + std::to_string(b), out);
    }
    head.named_params(px + ".head", out);
  }
};

struct GsParams {
  ConvP head;                                      // M -> widths[3]
  std::array<std::vector<CaSsmParams>, 4> blocks;  // at widths[3],[2],[1],[0]
  std::array<ConvP, 4> up;  // widths[i] -> 4*widths[i-1] (up[0]: widths[0] -> 12)

  static GsParams init(const ModelConfig& cfg, Rng& rng) {
    GsParams p;
    p.head = ConvP::init(cfg.widths[3], cfg.latent_channels, 3, rng);
    for (int s = 3; s >= 0; --s) {
      const int ch = cfg.widths[static_cast<size_t>(s)];
      for (int b = 0; b < cfg.blocks_per_stage; ++b)
        p.blocks[static_cast<size_t>(s)].push_back(CaSsmParams::init(ch, cfg.n_state, rng));
      const int out_ch = s > 0 ? 4 * cfg.widths[static_cast<size_t>(s - 1)] : 12;
      p.up[static_cast<size_t>(s)] = ConvP::init(out_ch, ch, 3, rng);
    }
    return p;
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    head.named_params(px + ".head", out);
    for (size_t s = 0; s < 4; ++s) {
      for (size_t b = 0; b < blocks[s].size(); ++b)
        blocks[s][b].named_params(px + ".s" + std::to_string(s) + ".blk" + std::to_string(b), out);
      up[s].named_params(px + ".up" + std::to_string(s), out);
    }
  }
};

struct HyperParams {
  ConvP ha1, ha2, ha3;  // encoder: s1, s2, s2
  ConvP hs1, hs2, hs3;  // decoder: two sub-pixel 2x ups, then 2M head

  static HyperParams init(const ModelConfig& cfg, Rng& rng) {
    HyperParams p;
    const int hy = cfg.hyper_channels;
    p.ha1 = ConvP::init(hy, cfg.latent_channels, 3, rng);
    p.ha2 = ConvP::init(hy, hy, 3, rng);
    p.ha3 = ConvP::init(hy, hy, 3, rng);
    p.hs1 = ConvP::init(4 * hy, hy, 3, rng);
    p.hs2 = ConvP::init(4 * hy, hy, 3, rng);
    p.hs3 = ConvP::init(2 * cfg.latent_channels, hy, 3, rng);
    return p;
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    ha1.named_params(px + ".ha1", out);
    ha2.named_params(px + ".ha2", out);
    ha3.named_params(px + ".ha3", out);
    hs1.named_params(px + ".hs1", out);
    hs2.named_params(px + ".hs2", out);
    hs3.named_params(px + ".hs3", out);
  }
};

// Latent residual prediction, one 3-layer stack per group; the final layer is
// zero-initialized so the untrained predictor is a no-op.
struct LrpParams {
  ConvP c1, c2, c3;

  static LrpParams init(const ModelConfig& cfg, Rng& rng) {
    LrpParams p;
    const int m = cfg.latent_channels;
    const int in_ch = 3 * m;  // 2M context + (S-1)*Mg decoded slot + Mg current
    const int h1 = m;
    const int h2 = std::max(m / 2, 4);
    p.c1 = ConvP::init(h1, in_ch, 3, rng);
    p.c2 = ConvP::init(h2, h1, 3, rng);
    p.c3 = ConvP::init(cfg.group_channels(), h2, 1, rng, /*zero=*/true);
    return p;
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    c1.named_params(px + ".c1", out);
    c2.named_params(px + ".c2", out);
    c3.named_params(px + ".c3", out);
  }
};

struct AutoencoderParams {
  GaParams ga;
  GsParams gs;
  HyperParams hy;
  std::vector<LrpParams> lrp;  // one per group

  static AutoencoderParams init(const ModelConfig& cfg, Rng& rng) {
    AutoencoderParams p;
    p.ga = GaParams::init(cfg, rng);
    p.gs = GsParams::init(cfg, rng);
    p.hy = HyperParams::init(cfg, rng);
    for (int g = 0; g < cfg.groups; ++g) p.lrp.push_back(LrpParams::init(cfg, rng));
    return p;
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    ga.named_params(px + ".ga", out);
    gs.named_params(px + ".gs", out);
    hy.named_params(px + ".hy", out);
    for (size_t g = 0; g < lrp.size(); ++g)
      lrp[g].named_params(px + ".lrp" + std::to_string(g), out);
  }
};

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

// x: [3,H,W] in [0,1], H and W multiples of 64 -> y: [M, H/16, W/16]
// `taps`, when given, collects the feature map after each stage's blocks
// (spectrum-probe hook).
inline Var analysis_transform(const Var& x, const GaParams& p, const ModelConfig& cfg,
                              std::vector<Var>* taps = nullptr) {
  if (x->value.rank() != 3 || x->value.dim(0) != 3)
    throw std::invalid_argument("analysis_transform: expected [3,H,W]");
  if (x->value.dim(1) % 64 != 0 || x->value.dim(2) % 64 != 0)
    throw std::invalid_argument("analysis_transform: H and W must be multiples of 64");
  Var t = x;
  for (int s = 0; s < 4; ++s) {
    t = conv2d(t, p.down[static_cast<size_t>(s)].w, p.down[static_cast<size_t>(s)].b, 2, 1);
    t = silu(t);
    for (const CaSsmParams& b : p.blocks[static_cast<size_t>(s)])
      t = ca_ssm_block(t, b, cfg.block_mode, cfg.fusion_mode);
    if (taps) taps->push_back(t);
  }
  return conv2d(t, p.head.w, p.head.b, 1, 1);
}

// ybar: [M,h,w] -> x_hat: [3,16h,16w]; clamped to [0,1] unless training
inline Var synthesis_transform(const Var& ybar, const GsParams& p, const ModelConfig& cfg,
                               bool clamp_output = true) {
  if (ybar->value.rank() != 3 || ybar->value.dim(0) != cfg.latent_channels)
    throw std::invalid_argument("synthesis_transform: latent channel mismatch");
  Var t = silu(conv2d(ybar, p.head.w, p.head.b, 1, 1));
  for (int s = 3; s >= 0; --s) {
    for (const CaSsmParams& b : p.blocks[static_cast<size_t>(s)])
      t = ca_ssm_block(t, b, cfg.block_mode, cfg.fusion_mode);
    t = pixel_shuffle2(conv2d(t, p.up[static_cast<size_t>(s)].w, p.up[static_cast<size_t>(s)].b, 1, 1));
    if (s > 0) t = silu(t);
  }
  return clamp_output ? clamp_unit(t) : t;
}

// y: [M,h,w] -> z: [hyper, h/4, w/4]
inline Var hyper_encoder(const Var& y, const HyperParams& p, const ModelConfig& cfg) {
  if (y->value.rank() != 3 || y->value.dim(0) != cfg.latent_channels)
    throw std::invalid_argument("hyper_encoder: latent channel mismatch");
  if (y->value.dim(1) % 4 != 0 || y->value.dim(2) % 4 != 0)
    throw std::invalid_argument("hyper_encoder: latent spatial dims must be multiples of 4");
  Var t = silu(conv2d(y, p.ha1.w, p.ha1.b, 1, 1));
  t = silu(conv2d(t, p.ha2.w, p.ha2.b, 2, 1));
  return conv2d(t, p.ha3.w, p.ha3.b, 2, 1);
}

// zhat: [hyper, hz, wz] -> context [2M, 4hz, 4wz]
inline Var hyper_decoder(const Var& zhat, const HyperParams& p, const ModelConfig& cfg) {
  if (zhat->value.rank() != 3 || zhat->value.dim(0) != cfg.hyper_channels)
    throw std::invalid_argument("hyper_decoder: hyper channel mismatch");
  Var t = silu(pixel_shuffle2(conv2d(zhat, p.hs1.w, p.hs1.b, 1, 1)));
  t = silu(pixel_shuffle2(conv2d(t, p.hs2.w, p.hs2.b, 1, 1)));
  return conv2d(t, p.hs3.w, p.hs3.b, 1, 1);
}

// Predicts the quantization residual for group i from the hyper context, the
// already-decoded groups (zero-padded slot of fixed (S-1)*Mg channels), and
// the group's own quantized latents.  Output squashed to (-0.5, 0.5).
inline Var latent_residual_predict(const Var& phi, const Var& decoded_ctx, const Var& yhat_i,
                                   const LrpParams& p, const ModelConfig& cfg) {
  const int mg = cfg.group_channels();
  if (phi->value.dim(0) != 2 * cfg.latent_channels ||
      decoded_ctx->value.dim(0) != (cfg.groups - 1) * mg || yhat_i->value.dim(0) != mg)
    throw std::invalid_argument("latent_residual_predict: channel mismatch");
  if (phi->value.dim(1) != yhat_i->value.dim(1) || phi->value.dim(2) != yhat_i->value.dim(2) ||
      decoded_ctx->value.dim(1) != yhat_i->value.dim(1) ||
      decoded_ctx->value.dim(2) != yhat_i->value.dim(2))
    throw std::invalid_argument("latent_residual_predict: spatial misalignment");
  Var t = concat_channels({phi, decoded_ctx, yhat_i});
  t = silu(conv2d(t, p.c1.w, p.c1.b, 1, 1));
  t = silu(conv2d(t, p.c2.w, p.c2.b, 1, 1));
  t = conv2d(t, p.c3.w, p.c3.b, 1, 0);
  return mul_scalar(tanh_op(t), 0.5);
}

}  // namespace cmamba

#endif  // CMAMBA_AUTOENCODER_HPP
