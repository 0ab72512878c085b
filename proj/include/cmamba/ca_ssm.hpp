#ifndef CMAMBA_CA_SSM_HPP
#define CMAMBA_CA_SSM_HPP

#include <utility>
#include <vector>

#include "cmamba/ssm.hpp"

namespace cmamba {

// ---------------------------------------------------------------------------
// ResBlock: x + conv2(SiLU(conv1(x))), 3x3 stride-1 same-channel convs.
// ---------------------------------------------------------------------------

struct ResBlockParams {
  Var w1, b1, w2, b2;
  int channels = 0;

  static ResBlockParams init(int c, Rng& rng, bool zero_conv2 = false) {
    ResBlockParams p;
    p.channels = c;
    const double sc = 1.0 / std::sqrt(9.0 * c);
    p.w1 = make_param(rng.gaussian_tensor({c, c, 3, 3}, sc));
    p.b1 = make_param(Tensor({c}));
    p.w2 = make_param(zero_conv2 ? Tensor({c, c, 3, 3}) : rng.gaussian_tensor({c, c, 3, 3}, sc));
    p.b2 = make_param(Tensor({c}));
    return p;
  }

  std::vector<Var> parameters() const { return {w1, b1, w2, b2}; }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    out.emplace_back(px + ".w1", w1); out.emplace_back(px + ".b1", b1);
    out.emplace_back(px + ".w2", w2); out.emplace_back(px + ".b2", b2);
  }
};

inline Var res_block(const Var& x, const ResBlockParams& p) {
  if (x->value.rank() != 3 || x->value.dim(0) != p.channels)
    throw std::invalid_argument("res_block: channel mismatch");
  Var t = conv2d(x, p.w1, p.b1, 1, 1);
  t = conv2d(silu(t), p.w2, p.b2, 1, 1);
  return add(x, t);
}

// ---------------------------------------------------------------------------
// Dynamic fusion (Eq. 8): per-channel two-way softmax over MLP logits of the
// max-pooled sum, then a 1x1 channel mix of the weighted paths.
// ---------------------------------------------------------------------------

struct FusionParams {
  Var w, bw;  // 1x1 channel mix
  Var m1_w1, m1_b1, m1_w2, m1_b2;  // logit MLP for the SSM path
  Var m2_w1, m2_b1, m2_w2, m2_b2;  // logit MLP for the CNN path
  int channels = 0;

  static FusionParams init(int c, Rng& rng) {
    FusionParams p;
    p.channels = c;
    const int hidden = std::max(1, c / 4);
    const double sc = 1.0 / std::sqrt(static_cast<double>(c));
    const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
    p.w = make_param(rng.gaussian_tensor({c, c}, sc));
    p.bw = make_param(Tensor({c}));
    p.m1_w1 = make_param(rng.gaussian_tensor({hidden, c}, sc));
    p.m1_b1 = make_param(Tensor({hidden}));
    p.m1_w2 = make_param(rng.gaussian_tensor({c, hidden}, sh));
    p.m1_b2 = make_param(Tensor({c}));
    p.m2_w1 = make_param(rng.gaussian_tensor({hidden, c}, sc));
    p.m2_b1 = make_param(Tensor({hidden}));
    p.m2_w2 = make_param(rng.gaussian_tensor({c, hidden}, sh));
    p.m2_b2 = make_param(Tensor({c}));
    return p;
  }

  std::vector<Var> parameters() const {
    return {w, bw, m1_w1, m1_b1, m1_w2, m1_b2, m2_w1, m2_b1, m2_w2, m2_b2};
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    out.emplace_back(px + ".w", w); out.emplace_back(px + ".bw", bw);
    out.emplace_back(px + ".m1_w1", m1_w1); out.emplace_back(px + ".m1_b1", m1_b1);
    out.emplace_back(px + ".m1_w2", m1_w2); out.emplace_back(px + ".m1_b2", m1_b2);
    out.emplace_back(px + ".m2_w1", m2_w1); out.emplace_back(px + ".m2_b1", m2_b1);
    out.emplace_back(px + ".m2_w2", m2_w2); out.emplace_back(px + ".m2_b2", m2_b2);
  }
};

// alpha = sigmoid(F_alpha - F_beta), beta = 1 - alpha: the two-way softmax.
inline std::pair<Var, Var> dynamic_fusion_weights(const Var& f_ssm, const Var& f_cnn,
                                                  const FusionParams& p) {
  check_same_shape(f_ssm, f_cnn, "dynamic_fuse");
  Var pooled = global_max_pool(add(f_ssm, f_cnn));
  Var fa = linear_vec(silu(linear_vec(pooled, p.m1_w1, p.m1_b1)), p.m1_w2, p.m1_b2);
  Var fb = linear_vec(silu(linear_vec(pooled, p.m2_w1, p.m2_b1)), p.m2_w2, p.m2_b2);
  Var alpha = sigmoid(sub(fa, fb));
  return {alpha, one_minus(alpha)};
}

inline Var dynamic_fuse(const Var& f_ssm, const Var& f_cnn, const FusionParams& p) {
  auto [alpha, beta] = dynamic_fusion_weights(f_ssm, f_cnn, p);
  Var mixed = add(scale_channels(f_ssm, alpha), scale_channels(f_cnn, beta));
  return conv1x1(mixed, p.w, p.bw);
}

// ---------------------------------------------------------------------------
// CA-SSM block: parallel VSS + ResBlock paths, fused.  BlockMode/FusionMode
// are ablation hooks (scan-only / conv-only backbones, fixed 0.5 fusion).
// ---------------------------------------------------------------------------

enum class BlockMode { kHybrid, kScanOnly, kConvOnly };
enum class FusionMode { kDynamic, kFixedHalf };

struct CaSsmParams {
  VssBlockParams vss;
  ResBlockParams res;
  FusionParams fuse;
  int channels = 0;

  static CaSsmParams init(int c, int n_state, Rng& rng) {
    CaSsmParams p;
    p.channels = c;
    p.vss = VssBlockParams::init(c, n_state, rng);
    p.res = ResBlockParams::init(c, rng);
    p.fuse = FusionParams::init(c, rng);
    return p;
  }

  std::vector<Var> parameters() const {
    std::vector<Var> out = vss.parameters();
    auto r = res.parameters();
    auto f = fuse.parameters();
    out.insert(out.end(), r.begin(), r.end());
    out.insert(out.end(), f.begin(), f.end());
    return out;
  }

  void named_params(const std::string& px, std::vector<std::pair<std::string, Var>>& out) const {
    vss.named_params(px + ".vss", out);
    res.named_params(px + ".res", out);
    fuse.named_params(px + ".fuse", out);
  }
};

inline Var ca_ssm_block(const Var& x, const CaSsmParams& p, BlockMode mode = BlockMode::kHybrid,
                        FusionMode fusion = FusionMode::kDynamic) {
  if (x->value.rank() != 3 || x->value.dim(0) != p.channels)
    throw std::invalid_argument("ca_ssm_block: channel mismatch");
  if (mode == BlockMode::kScanOnly) return vss_block(x, p.vss);
  if (mode == BlockMode::kConvOnly) return res_block(x, p.res);
  Var f_ssm = vss_block(x, p.vss);
  Var f_cnn = res_block(x, p.res);
  if (fusion == FusionMode::kFixedHalf) {
    Var mixed = mul_scalar(add(f_ssm, f_cnn), 0.5);
    return conv1x1(mixed, p.fuse.w, p.fuse.bw);
  }
  return dynamic_fuse(f_ssm, f_cnn, p.fuse);
}

}  // namespace cmamba

#endif  // CMAMBA_CA_SSM_HPP
