#ifndef CMAMBA_ENTROPY_HPP
#define CMAMBA_ENTROPY_HPP

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "cmamba/autoencoder.hpp"

namespace cmamba {

inline constexpr double kSigmaMin = 1e-3;
inline constexpr double kPMin = 1.0 / 65536.0;  // 2^-16, matches coder CDF precision

struct GaussianParams {
  Var mu;
  Var sigma;  // strictly > kSigmaMin via softplus + floor
};

// ---------------------------------------------------------------------------
// Channel groups
// ---------------------------------------------------------------------------

inline std::vector<Var> split_groups(const Var& y, int s) {
  if (y->value.rank() != 3) throw std::invalid_argument("split_groups: expected [C,H,W]");
  const int m = y->value.dim(0);
  if (s < 1 || m % s != 0) throw std::invalid_argument("split_groups: channels not divisible by S");
  const int mg = m / s;
  std::vector<Var> out;
  out.reserve(static_cast<size_t>(s));
  for (int i = 0; i < s; ++i) out.push_back(slice_channels(y, i * mg, (i + 1) * mg));
  return out;
}

inline Var merge_groups(const std::vector<Var>& groups) {
  if (groups.empty()) throw std::invalid_argument("merge_groups: empty");
  return concat_channels(groups);
}

// ---------------------------------------------------------------------------
// Factorized prior for the hyper-latent: per-channel logistic over integer bins
// ---------------------------------------------------------------------------

struct FactorizedPrior {
  Var loc, log_scale;  // [C] each
  int channels = 0;

  static FactorizedPrior init(int c) {
    FactorizedPrior p;
    p.channels = c;
    p.loc = make_param(Tensor({c}));
    p.log_scale = make_param(Tensor({c}));
    return p;
  }

  std::vector<Var> parameters() const { return {loc, log_scale}; }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    out.emplace_back(px + ".loc", loc);
    out.emplace_back(px + ".log_scale", log_scale);
  }
};

// ---------------------------------------------------------------------------
// Per-group context network: squeeze -> residual SS2D -> residual FFN -> head.
// Input is concat(phi [2M], decoded groups zero-padded to (S-1)*Mg channels).
// ---------------------------------------------------------------------------

struct EntropyNetParams {
  Var w_sq, b_sq;      // [Eh, Cin], [Eh]
  Ss2dParams ss2d_p;   // over Eh channels
  Var ln_g, ln_b;      // [Eh]
  Var w_ffn, b_ffn;    // [Eh, Eh]
  Var w_head, b_head;  // [2*Mg, Eh], [2*Mg]
  int in_channels = 0, hidden = 0, group_ch = 0;

  static EntropyNetParams init(int cin, int mg, int n_state, Rng& rng) {
    EntropyNetParams p;
    p.in_channels = cin;
    p.group_ch = mg;
    p.hidden = std::max(2 * mg, 8);
    const int eh = p.hidden;
    p.w_sq = make_param(rng.gaussian_tensor({eh, cin}, 1.0 / std::sqrt(static_cast<double>(cin))));
    p.b_sq = make_param(Tensor({eh}));
    p.ss2d_p = Ss2dParams::init(eh, n_state, rng);
    p.ln_g = make_param(Tensor::full({eh}, 1.0));
    p.ln_b = make_param(Tensor({eh}));
    p.w_ffn = make_param(rng.gaussian_tensor({eh, eh}, 0.1 / std::sqrt(static_cast<double>(eh))));
    p.b_ffn = make_param(Tensor({eh}));
    p.w_head = make_param(rng.gaussian_tensor({2 * mg, eh}, 0.01));
    Tensor bh({2 * mg});
    const double raw1 = std::log(std::expm1(1.0));  // softplus(raw1) = 1, so sigma starts near 1
    for (int i = mg; i < 2 * mg; ++i) bh[i] = raw1;
    p.b_head = make_param(std::move(bh));
    return p;
  }

  std::vector<Var> parameters() const {
    std::vector<Var> out = {w_sq, b_sq, ln_g, ln_b, w_ffn, b_ffn, w_head, b_head};
    auto v = ss2d_p.parameters();
    out.insert(out.end(), v.begin(), v.end());
    return out;
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    out.emplace_back(px + ".w_sq", w_sq);
    out.emplace_back(px + ".b_sq", b_sq);
    ss2d_p.named_params(px + ".ss2d", out);
    out.emplace_back(px + ".ln_g", ln_g);
    out.emplace_back(px + ".ln_b", ln_b);
    out.emplace_back(px + ".w_ffn", w_ffn);
    out.emplace_back(px + ".b_ffn", b_ffn);
    out.emplace_back(px + ".w_head", w_head);
    out.emplace_back(px + ".b_head", b_head);
  }
};

struct EntropyParams {
  std::vector<EntropyNetParams> groups;  // one per group, no sharing
  FactorizedPrior prior;                 // over hyper-latent channels

  static EntropyParams init(const ModelConfig& cfg, Rng& rng) {
    EntropyParams p;
    const int mg = cfg.group_channels();
    const int cin = 2 * cfg.latent_channels + (cfg.groups - 1) * mg;
    for (int i = 0; i < cfg.groups; ++i)
      p.groups.push_back(EntropyNetParams::init(cin, mg, cfg.n_state, rng));
    p.prior = FactorizedPrior::init(cfg.hyper_channels);
    return p;
  }

  std::vector<Var> parameters() const {
    std::vector<Var> out;
    for (const auto& g : groups) {
      auto v = g.parameters();
      out.insert(out.end(), v.begin(), v.end());
    }
    auto v = prior.parameters();
    out.insert(out.end(), v.begin(), v.end());
    return out;
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    for (size_t i = 0; i < groups.size(); ++i)
      groups[i].named_params(px + ".g" + std::to_string(i + 1), out);
    prior.named_params(px + ".prior", out);
  }
};

// phi: [2M,h,w] hyper context; decoded: groups 1..i-1 already reconstructed,
// each [Mg,h,w].  The context slot has fixed width (S-1)*Mg; the unfilled tail
// is zero (all of it when i = 1), so parameter shapes match across groups.
inline GaussianParams predict_group_params(const Var& phi, const std::vector<Var>& decoded, int i,
                                           const EntropyNetParams& p, const ModelConfig& cfg) {
  const int m = cfg.latent_channels, s = cfg.groups, mg = cfg.group_channels();
  if (i < 1 || i > s) throw std::invalid_argument("predict_group_params: group index out of range");
  if (static_cast<int>(decoded.size()) != i - 1)
    throw std::invalid_argument("predict_group_params: need exactly i-1 decoded groups");
  if (phi->value.rank() != 3 || phi->value.dim(0) != 2 * m)
    throw std::invalid_argument("predict_group_params: phi must be [2M,h,w]");
  const int h = phi->value.dim(1), w = phi->value.dim(2);
  for (const Var& g : decoded)
    if (g->value.rank() != 3 || g->value.dim(0) != mg || g->value.dim(1) != h ||
        g->value.dim(2) != w)
      throw std::invalid_argument("predict_group_params: decoded group shape mismatch");
  if (p.in_channels != 2 * m + (s - 1) * mg || p.group_ch != mg)
    throw std::invalid_argument("predict_group_params: params built for a different config");

  std::vector<Var> parts;
  parts.push_back(phi);
  for (const Var& g : decoded) parts.push_back(g);
  const int pad = (s - i) * mg;
  if (pad > 0) parts.push_back(constant(Tensor({pad, h, w})));
  const Var inp = parts.size() == 1 ? parts[0] : concat_channels(parts);

  const Var f_sq = conv1x1(inp, p.w_sq, p.b_sq);
  const Var f_ssm = add(ss2d(f_sq, p.ss2d_p), f_sq);
  const Var body = add(conv1x1(layer_norm_chan(f_ssm, p.ln_g, p.ln_b), p.w_ffn, p.b_ffn), f_ssm);
  const Var head = conv1x1(body, p.w_head, p.b_head);

  GaussianParams out;
  out.mu = slice_channels(head, 0, mg);
  out.sigma = add_scalar(softplus(slice_channels(head, mg, 2 * mg)), kSigmaMin);
  return out;
}

// ---------------------------------------------------------------------------
// Likelihoods and rate
// ---------------------------------------------------------------------------

// Integer-bin Gaussian mass: PhiN((v - mu + 0.5)/sigma) - PhiN((v - mu - 0.5)/sigma).
inline Var gaussian_likelihood(const Var& yhat, const Var& mu, const Var& sigma) {
  check_same_shape(yhat, mu, "gaussian_likelihood");
  check_same_shape(yhat, sigma, "gaussian_likelihood");
  const Var centered = sub(yhat, mu);
  const Var hi = normal_cdf_op(div(add_scalar(centered, 0.5), sigma));
  const Var lo = normal_cdf_op(div(add_scalar(centered, -0.5), sigma));
  return sub(hi, lo);
}

// Logistic bin mass with per-channel location and scale.
inline Var factorized_likelihood(const Var& zhat, const FactorizedPrior& prior) {
  if (zhat->value.rank() != 3 || zhat->value.dim(0) != prior.channels)
    throw std::invalid_argument("factorized_likelihood: channel mismatch");
  const Var inv_scale = exp_op(neg(prior.log_scale));
  const Var centered = shift_channels(zhat, neg(prior.loc));
  const Var hi = sigmoid(scale_channels(add_scalar(centered, 0.5), inv_scale));
  const Var lo = sigmoid(scale_channels(add_scalar(centered, -0.5), inv_scale));
  return sub(hi, lo);
}

// Total bits: sum of -log2 p with p floored at kPMin.
inline Var estimate_rate(const Var& p) {
  return mul_scalar(neg(sum_all(log_op(clamp_min_op(p, kPMin)))), std::numbers::log2e);
}

}  // namespace cmamba

#endif  // CMAMBA_ENTROPY_HPP
