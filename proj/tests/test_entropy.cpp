// Entropy model: group split/merge, discretized-Gaussian and logistic bin
// masses against erf/sigmoid oracles, rate floor, context-net causality and
// residual wiring, finite-difference gradients.

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cmamba/entropy.hpp"
#include "testutil.hpp"

using namespace cmamba;
using testutil::check_gradients_inplace;
using testutil::max_abs_diff;
using testutil::weighted_sum;

namespace {

Rng& rng() {
  static Rng r(90210);
  return r;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.widths = {4, 4, 4, 4};
  cfg.latent_channels = 8;
  cfg.hyper_channels = 4;
  cfg.groups = 4;
  cfg.n_state = 2;
  return cfg;
}

// p for a single scalar bin at value v under N(mu, sigma).
double bin_mass(double v, double mu, double sigma) {
  Var p = gaussian_likelihood(constant(Tensor::scalar(v)), constant(Tensor::scalar(mu)),
                              constant(Tensor::scalar(sigma)));
  return p->value.item();
}

}  // namespace

// ---------------------------------------------------------------------------
// split / merge
// ---------------------------------------------------------------------------

TEST(Groups, UniformSpansDeskScale) {
  Var y = constant(rng().uniform_tensor({96, 4, 4}, -3.0, 3.0));
  auto groups = split_groups(y, 4);
  ASSERT_EQ(groups.size(), 4u);
  const int64_t span = 24 * 16;
  for (int i = 0; i < 4; ++i) {
    ASSERT_EQ(groups[static_cast<size_t>(i)]->value.dim(0), 24);
    for (int64_t j = 0; j < span; ++j)
      ASSERT_EQ(groups[static_cast<size_t>(i)]->value[j], y->value[i * span + j]);
  }
}

TEST(Groups, SingleGroupIsWholeLatent) {
  Var y = constant(rng().uniform_tensor({6, 2, 3}, -1.0, 1.0));
  auto groups = split_groups(y, 1);
  ASSERT_EQ(groups.size(), 1u);
  EXPECT_EQ(max_abs_diff(groups[0]->value, y->value), 0.0);
}

TEST(Groups, MergeInvertsSplit) {
  for (int s : {1, 2, 3, 4, 6}) {
    Var y = constant(rng().uniform_tensor({12, 3, 2}, -5.0, 5.0));
    Var back = merge_groups(split_groups(y, s));
    EXPECT_EQ(max_abs_diff(back->value, y->value), 0.0) << "S=" << s;
  }
}

TEST(Groups, RejectsBadInput) {
  Var y = constant(Tensor({10, 2, 2}));
  EXPECT_THROW(split_groups(y, 3), std::invalid_argument);
  EXPECT_THROW(split_groups(y, 0), std::invalid_argument);
  EXPECT_THROW(split_groups(constant(Tensor({4, 4})), 2), std::invalid_argument);
  EXPECT_THROW(merge_groups({}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Gaussian bin mass
// ---------------------------------------------------------------------------

TEST(GaussianLikelihood, UnitSigmaCenterBin) {
  const double p = bin_mass(0.0, 0.0, 1.0);
  // PhiN(0.5) - PhiN(-0.5) = erf(0.5 / sqrt(2))
  const double oracle = std::erf(0.5 / std::sqrt(2.0));
  EXPECT_NEAR(p, 0.3829, 1e-4);
  EXPECT_NEAR(p, oracle, 1e-12);
}

TEST(GaussianLikelihood, WideSigmaMatchesPdfApprox) {
  const double p = bin_mass(0.0, 0.0, 100.0);
  EXPECT_NEAR(p, 1.0 / (100.0 * std::sqrt(2.0 * M_PI)), 1e-5);
  EXPECT_NEAR(p, std::erf(0.005 / std::sqrt(2.0)), 1e-12);
}

TEST(GaussianLikelihood, SymmetricAboutMean) {
  const double mu = 0.3, sigma = 0.7;
  for (int k = 1; k <= 5; ++k)
    EXPECT_NEAR(bin_mass(mu + k, mu, sigma), bin_mass(mu - k, mu, sigma), 1e-12) << "k=" << k;
}

TEST(GaussianLikelihood, InUnitInterval) {
  for (int t = 0; t < 200; ++t) {
    const double mu = rng().uniform(-8.0, 8.0);
    const double sigma = kSigmaMin + rng().uniform(0.0, 20.0);
    const double v = std::floor(rng().uniform(-30.0, 30.0));
    const double p = bin_mass(v, mu, sigma);
    ASSERT_GT(p, -1e-300);
    ASSERT_LE(p, 1.0);
    ASSERT_TRUE(std::isfinite(p));
  }
}

TEST(GaussianLikelihood, GradientMatchesFiniteDifferences) {
  Var yhat = constant(Tensor::full({4}, 1.0));
  yhat->value[1] = -2.0;
  yhat->value[2] = 0.0;
  yhat->value[3] = 3.0;
  Var mu = make_param(rng().uniform_tensor({4}, -1.0, 1.0));
  Var sigma = make_param(rng().uniform_tensor({4}, 0.5, 2.0));
  const Tensor wts = rng().uniform_tensor({4}, 0.5, 1.5);
  auto f = [&] { return weighted_sum(gaussian_likelihood(yhat, mu, sigma), wts); };
  auto res = check_gradients_inplace(f, {mu, sigma});
  EXPECT_LT(res.max_rel_err, 1e-6) << res.describe();
}

// ---------------------------------------------------------------------------
// Logistic factorized prior
// ---------------------------------------------------------------------------

TEST(FactorizedLikelihood, CenterBinUnitScale) {
  FactorizedPrior prior = FactorizedPrior::init(1);
  Var z = constant(Tensor({1, 1, 1}));
  const double p = factorized_likelihood(z, prior)->value.item();
  const double oracle = 2.0 / (1.0 + std::exp(-0.5)) - 1.0;
  EXPECT_NEAR(p, 0.2449, 1e-4);
  EXPECT_NEAR(p, oracle, 1e-12);
}

TEST(FactorizedLikelihood, NormalizesOverIntegerSupport) {
  const double loc = 0.37, scale = 1.3;
  FactorizedPrior prior = FactorizedPrior::init(1);
  prior.loc->value[0] = loc;
  prior.log_scale->value[0] = std::log(scale);
  const int k0 = static_cast<int>(std::ceil(loc - 40.0 * scale));
  const int k1 = static_cast<int>(std::floor(loc + 40.0 * scale));
  Tensor bins({1, k1 - k0 + 1, 1});
  for (int k = k0; k <= k1; ++k) bins[k - k0] = k;
  Var p = factorized_likelihood(constant(bins), prior);
  double total = 0.0;
  for (int64_t i = 0; i < p->value.numel(); ++i) total += p->value[i];
  EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(FactorizedLikelihood, PerChannelLocation) {
  FactorizedPrior prior = FactorizedPrior::init(2);
  prior.loc->value[1] = 3.0;
  Tensor z({2, 1, 1});  // zhat = 0 in both channels
  Var p = factorized_likelihood(constant(z), prior);
  EXPECT_NEAR(p->value[0], 0.2449, 1e-4);
  EXPECT_LT(p->value[1], 0.05);  // three scales away from its location
  // mass peaks at the integer nearest the location
  double best_p = 0.0;
  int best_k = -99;
  for (int k = 1; k <= 5; ++k) {
    Tensor zk({2, 1, 1});
    zk[1] = k;
    const double pk = factorized_likelihood(constant(zk), prior)->value[1];
    if (pk > best_p) {
      best_p = pk;
      best_k = k;
    }
  }
  EXPECT_EQ(best_k, 3);
}

TEST(FactorizedLikelihood, InUnitIntervalAndRejectsMismatch) {
  FactorizedPrior prior = FactorizedPrior::init(3);
  prior.loc->value = rng().uniform_tensor({3}, -2.0, 2.0);
  prior.log_scale->value = rng().uniform_tensor({3}, -1.5, 1.5);
  Var z = constant(rng().uniform_tensor({3, 4, 5}, -10.0, 10.0));
  Var p = factorized_likelihood(z, prior);
  for (int64_t i = 0; i < p->value.numel(); ++i) {
    ASSERT_GT(p->value[i], 0.0);
    ASSERT_LE(p->value[i], 1.0);
  }
  EXPECT_THROW(factorized_likelihood(constant(Tensor({2, 4, 5})), prior), std::invalid_argument);
}

TEST(FactorizedLikelihood, GradientMatchesFiniteDifferences) {
  FactorizedPrior prior = FactorizedPrior::init(2);
  prior.loc->value = rng().uniform_tensor({2}, -1.0, 1.0);
  prior.log_scale->value = rng().uniform_tensor({2}, -0.5, 0.5);
  Var z = constant(rng().uniform_tensor({2, 3, 3}, -2.0, 2.0));
  const Tensor wts = rng().uniform_tensor({2, 3, 3}, 0.5, 1.5);
  auto f = [&] { return weighted_sum(factorized_likelihood(z, prior), wts); };
  auto res = check_gradients_inplace(f, prior.parameters());
  EXPECT_LT(res.max_rel_err, 1e-6) << res.describe();
}

// ---------------------------------------------------------------------------
// Rate estimate
// ---------------------------------------------------------------------------

TEST(Rate, HalfProbabilityCountsOneBitEach) {
  Var p = constant(Tensor::full({100}, 0.5));
  EXPECT_NEAR(estimate_rate(p)->value.item(), 100.0, 1e-9);
}

TEST(Rate, CertainSymbolsAreFree) {
  EXPECT_NEAR(estimate_rate(constant(Tensor::full({7}, 1.0)))->value.item(), 0.0, 1e-12);
  Tensor mixed({2});
  mixed[0] = 1.0;
  mixed[1] = 0.5;
  EXPECT_NEAR(estimate_rate(constant(mixed))->value.item(), 1.0, 1e-9);
}

TEST(Rate, FlooredAtSixteenBits) {
  EXPECT_NEAR(estimate_rate(constant(Tensor::scalar(1e-9)))->value.item(), 16.0, 1e-9);
  EXPECT_NEAR(estimate_rate(constant(Tensor::scalar(0.0)))->value.item(), 16.0, 1e-9);
  EXPECT_DOUBLE_EQ(estimate_rate(constant(Tensor::scalar(1e-9)))->value.item(),
                   estimate_rate(constant(Tensor::scalar(kPMin)))->value.item());
}

TEST(Rate, ShrinkingSigmaAroundTrueValueCutsBits) {
  double prev_rate = 1e300;
  for (double sigma : {10.0, 1.0, 0.1}) {
    Var p = gaussian_likelihood(constant(Tensor::scalar(0.0)), constant(Tensor::scalar(0.0)),
                                constant(Tensor::scalar(sigma)));
    const double bits = estimate_rate(p)->value.item();
    EXPECT_GE(bits, 0.0);
    EXPECT_LT(bits, prev_rate);
    prev_rate = bits;
  }
}

// ---------------------------------------------------------------------------
// Context network
// ---------------------------------------------------------------------------

TEST(PredictGroup, ShapesAndSigmaFloor) {
  ModelConfig cfg = tiny_config();
  EntropyParams ent = EntropyParams::init(cfg, rng());
  Var phi = constant(rng().uniform_tensor({16, 3, 3}, -1.0, 1.0));
  Var y = constant(rng().uniform_tensor({8, 3, 3}, -4.0, 4.0));
  auto groups = split_groups(y, cfg.groups);
  for (int i = 1; i <= cfg.groups; ++i) {
    std::vector<Var> prefix(groups.begin(), groups.begin() + (i - 1));
    GaussianParams gp =
        predict_group_params(phi, prefix, i, ent.groups[static_cast<size_t>(i - 1)], cfg);
    ASSERT_EQ(gp.mu->value.dim(0), 2);
    ASSERT_EQ(gp.mu->value.dim(1), 3);
    ASSERT_EQ(gp.sigma->value.dim(2), 3);
    ASSERT_TRUE(gp.mu->value.all_finite());
    for (int64_t j = 0; j < gp.sigma->value.numel(); ++j)
      ASSERT_GT(gp.sigma->value[j], kSigmaMin);
  }
}

TEST(PredictGroup, DependsOnlyOnDecodedPrefix) {
  ModelConfig cfg = tiny_config();
  EntropyParams ent = EntropyParams::init(cfg, rng());
  Var phi = constant(rng().uniform_tensor({16, 3, 3}, -1.0, 1.0));
  const int mg = cfg.group_channels();
  Tensor ya = rng().uniform_tensor({8, 3, 3}, -4.0, 4.0);
  for (int i = 2; i <= 4; ++i) {
    // mutate every channel from group i onward; prediction for group i must not move
    Tensor yb = ya;
    for (int64_t j = static_cast<int64_t>((i - 1) * mg) * 9; j < yb.numel(); ++j)
      yb[j] = rng().uniform(-4.0, 4.0);
    auto ga = split_groups(constant(ya), cfg.groups);
    auto gb = split_groups(constant(yb), cfg.groups);
    std::vector<Var> pa(ga.begin(), ga.begin() + (i - 1));
    std::vector<Var> pb(gb.begin(), gb.begin() + (i - 1));
    const auto& net = ent.groups[static_cast<size_t>(i - 1)];
    GaussianParams ra = predict_group_params(phi, pa, i, net, cfg);
    GaussianParams rb = predict_group_params(phi, pb, i, net, cfg);
    EXPECT_EQ(max_abs_diff(ra.mu->value, rb.mu->value), 0.0) << "i=" << i;
    EXPECT_EQ(max_abs_diff(ra.sigma->value, rb.sigma->value), 0.0) << "i=" << i;
  }
}

TEST(PredictGroup, RejectsBadShapes) {
  ModelConfig cfg = tiny_config();
  EntropyParams ent = EntropyParams::init(cfg, rng());
  Var phi = constant(Tensor({16, 3, 3}));
  Var g = constant(Tensor({2, 3, 3}));
  EXPECT_THROW(predict_group_params(phi, {}, 0, ent.groups[0], cfg), std::invalid_argument);
  EXPECT_THROW(predict_group_params(phi, {}, 5, ent.groups[0], cfg), std::invalid_argument);
  EXPECT_THROW(predict_group_params(phi, {g}, 1, ent.groups[0], cfg), std::invalid_argument);
  EXPECT_THROW(predict_group_params(phi, {}, 2, ent.groups[1], cfg), std::invalid_argument);
  EXPECT_THROW(predict_group_params(constant(Tensor({15, 3, 3})), {}, 1, ent.groups[0], cfg),
               std::invalid_argument);
  EXPECT_THROW(predict_group_params(phi, {constant(Tensor({3, 3, 3}))}, 2, ent.groups[1], cfg),
               std::invalid_argument);
  EXPECT_THROW(predict_group_params(phi, {constant(Tensor({2, 3, 4}))}, 2, ent.groups[1], cfg),
               std::invalid_argument);
  ModelConfig other = cfg;
  other.latent_channels = 12;
  EntropyParams ent2 = EntropyParams::init(other, rng());
  EXPECT_THROW(predict_group_params(phi, {}, 1, ent2.groups[0], cfg), std::invalid_argument);
}

TEST(PredictGroup, ZeroFfnMakesLayerNormInert) {
  ModelConfig cfg = tiny_config();
  EntropyNetParams net = EntropyNetParams::init(22, 2, cfg.n_state, rng());
  net.w_ffn->value = Tensor(net.w_ffn->value.shape());
  net.b_ffn->value = Tensor(net.b_ffn->value.shape());
  Var phi = constant(rng().uniform_tensor({16, 4, 4}, -1.0, 1.0));
  Var g1 = constant(rng().uniform_tensor({2, 4, 4}, -2.0, 2.0));
  GaussianParams before = predict_group_params(phi, {g1}, 2, net, cfg);
  net.ln_g->value = rng().uniform_tensor({net.hidden}, -7.0, 7.0);
  net.ln_b->value = rng().uniform_tensor({net.hidden}, -7.0, 7.0);
  GaussianParams after = predict_group_params(phi, {g1}, 2, net, cfg);
  EXPECT_EQ(max_abs_diff(before.mu->value, after.mu->value), 0.0);
  EXPECT_EQ(max_abs_diff(before.sigma->value, after.sigma->value), 0.0);
  // a nonzero ffn re-couples the normalized path
  net.w_ffn->value = rng().gaussian_tensor(net.w_ffn->value.shape(), 0.2);
  GaussianParams coupled = predict_group_params(phi, {g1}, 2, net, cfg);
  EXPECT_GT(max_abs_diff(coupled.mu->value, after.mu->value), 0.0);
}

TEST(PredictGroup, ZeroHeadGivesBaselineParams) {
  ModelConfig cfg = tiny_config();
  EntropyNetParams net = EntropyNetParams::init(22, 2, cfg.n_state, rng());
  net.w_head->value = Tensor(net.w_head->value.shape());
  net.b_head->value = Tensor(net.b_head->value.shape());
  Var phi = constant(rng().uniform_tensor({16, 3, 3}, -1.0, 1.0));
  GaussianParams gp = predict_group_params(phi, {}, 1, net, cfg);
  const double sigma0 = detail::softplus_v(0.0) + kSigmaMin;
  for (int64_t j = 0; j < gp.mu->value.numel(); ++j) {
    ASSERT_EQ(gp.mu->value[j], 0.0);
    ASSERT_DOUBLE_EQ(gp.sigma->value[j], sigma0);
  }
}

TEST(PredictGroup, GradientMatchesFiniteDifferences) {
  ModelConfig cfg = tiny_config();
  EntropyNetParams net = EntropyNetParams::init(22, 2, cfg.n_state, rng());
  Var phi = make_param(rng().uniform_tensor({16, 3, 3}, -1.0, 1.0));
  Var g1 = make_param(rng().uniform_tensor({2, 3, 3}, -2.0, 2.0));
  const Tensor w_mu = rng().uniform_tensor({2, 3, 3}, 0.5, 1.5);
  const Tensor w_sg = rng().uniform_tensor({2, 3, 3}, 0.5, 1.5);
  auto f = [&] {
    GaussianParams gp = predict_group_params(phi, {g1}, 2, net, cfg);
    return add(weighted_sum(gp.mu, w_mu), weighted_sum(gp.sigma, w_sg));
  };
  std::vector<Var> params = net.parameters();
  params.push_back(phi);
  params.push_back(g1);
  auto res = check_gradients_inplace(f, params, 1e-5, 16);
  EXPECT_LT(res.max_rel_err, 1e-3) << res.describe();
}

TEST(EntropyParams, GroupsShareNothingAndNamesAreUnique) {
  ModelConfig cfg = tiny_config();
  EntropyParams ent = EntropyParams::init(cfg, rng());
  ASSERT_EQ(ent.groups.size(), 4u);
  EXPECT_EQ(ent.prior.channels, cfg.hyper_channels);
  std::set<const Node*> seen;
  size_t total = 0;
  for (const auto& g : ent.groups)
    for (const Var& p : g.parameters()) {
      seen.insert(p.get());
      ++total;
    }
  EXPECT_EQ(seen.size(), total);  // pointer-disjoint across groups

  std::vector<std::pair<std::string, Var>> named;
  ent.named_params("ent", named);
  EXPECT_EQ(named.size(), ent.parameters().size());
  std::set<std::string> names;
  for (const auto& [name, v] : named) names.insert(name);
  EXPECT_EQ(names.size(), named.size());
}
