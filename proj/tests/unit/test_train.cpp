#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "upmad/phantom.hpp"
#include "upmad/train.hpp"

using namespace upmad;

namespace {

NetworkConfig tiny() {
  NetworkConfig c;
  c.stage_widths = {4, 8, 8, 8};
  c.gn_groups = 2;
  return c;
}

// straight transcription of the decoupled update, one scalar at a time
struct AdamOracle {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, double lr, double wd) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    return theta - lr * mh / (std::sqrt(vh) + 1e-8) - lr * wd * theta;
  }
};

}  // namespace

TEST(AdamW, FirstStepIsMinusLr) {
  std::vector<double> p{0.0}, g{1.0};
  AdamState s;
  adamw_step<double>(p, g, s, 1e-3, 0.0);
  EXPECT_NEAR(p[0], -1e-3 / (1 + 1e-8), 1e-18);
  EXPECT_EQ(s.t, 1u);
}

TEST(AdamW, FixedPointAndPureDecay) {
  std::vector<double> p{1.5, -2.0, 0.25}, zero(3, 0.0);
  AdamState s;
  for (int i = 0; i < 5; ++i) adamw_step<double>(p, zero, s, 1e-2, 0.0);
  EXPECT_EQ(p, (std::vector<double>{1.5, -2.0, 0.25}));
  AdamState d;
  adamw_step<double>(p, zero, d, 1e-2, 0.1);
  EXPECT_NEAR(p[0], 1.5 * (1 - 1e-3), 1e-12);
  EXPECT_NEAR(p[1], -2.0 * (1 - 1e-3), 1e-12);
  EXPECT_NEAR(p[2], 0.25 * (1 - 1e-3), 1e-12);
}

TEST(AdamW, MatchesOracleOverManySteps) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> p{0.3, -0.7}, ref = p;
  AdamState s;
  AdamOracle o[2];
  for (int step = 0; step < 50; ++step) {
    std::vector<double> g{n(rng), n(rng)};
    adamw_step<double>(p, g, s, 3e-3, 1e-2);
    for (int i = 0; i < 2; ++i) ref[i] = o[i].step(ref[i], g[i], 3e-3, 1e-2);
  }
  EXPECT_NEAR(p[0], ref[0], 1e-12);
  EXPECT_NEAR(p[1], ref[1], 1e-12);
  std::vector<double> g3(3);
  EXPECT_THROW(adamw_step<double>(p, g3, s, 1e-3, 0.0), ShapeError);
}

TEST(AdamW, DecayOnlyOnConvKernels) {
  Network<double> net(tiny(), 2);
  std::vector<std::vector<double>> before;
  for (auto& p : net.params()) {
    for (double& v : p.value.mutable_data()) v = 1.0;
    before.emplace_back(p.value.data().begin(), p.value.data().end());
  }
  AdamW<double> opt(net.params(), 0.5);
  opt.step(0.1);  // no gradients anywhere: only decay moves values
  bool saw_gamma = false;
  for (const auto& p : net.params()) {
    const double expect = decays(p.kind) ? 1.0 - 0.05 : 1.0;
    for (double v : p.value.data()) ASSERT_NEAR(v, expect, 1e-15) << p.name;
    saw_gamma |= p.kind == ParamKind::AttentionScale;
  }
  EXPECT_TRUE(saw_gamma);
  EXPECT_FALSE(decays(ParamKind::Bias));
  EXPECT_FALSE(decays(ParamKind::NormScale));
  EXPECT_FALSE(decays(ParamKind::NormShift));
  EXPECT_FALSE(decays(ParamKind::AttentionScale));
}

TEST(Cosine, ValuesAndMonotone) {
  TrainConfig c;
  EXPECT_EQ(cosine_lr(0, c), 1e-4);
  EXPECT_NEAR(cosine_lr(25, c), 5e-5, 1e-18);
  EXPECT_EQ(cosine_lr(50, c), c.lr_min);
  EXPECT_EQ(cosine_lr(400, c), c.lr_min);
  for (std::size_t t = 1; t <= 50; ++t) EXPECT_LE(cosine_lr(t, c), cosine_lr(t - 1, c));
  c.lr_min = 1e-6;
  EXPECT_NEAR(cosine_lr(50, c), 1e-6, 1e-18);
  c.cosine_restarts = true;
  EXPECT_EQ(cosine_lr(50, c), cosine_lr(0, c));
  EXPECT_EQ(cosine_lr(75, c), cosine_lr(25, c));
}

TEST(EarlyStop, ConstantLossStopsAfterEpochFour) {
  EarlyStopping s(3);
  std::size_t stopped_at = 0;
  for (std::size_t e = 0; e < 20; ++e)
    if (s.update(1.0) == StopDecision::Stop) {
      stopped_at = e;
      break;
    }
  EXPECT_EQ(stopped_at, 4u);
  EXPECT_EQ(s.best_epoch(), 0u);
}

TEST(EarlyStop, MonotoneNeverStopsAndNanErrors) {
  EarlyStopping s(2);
  for (int e = 0; e < 100; ++e) {
    ASSERT_EQ(s.update(1.0 / (e + 1)), StopDecision::Continue);
    EXPECT_TRUE(s.improved());
  }
  EXPECT_EQ(s.update(std::nan("")), StopDecision::Error);
  EarlyStopping t(5);
  t.update(1.0);
  EXPECT_EQ(t.update(1.0), StopDecision::Continue);
  EXPECT_FALSE(t.improved());  // equal is not an improvement
  EXPECT_EQ(t.epochs_since_best(), 1u);
}

TEST(History, Format) {
  const std::vector<EpochRecord> h{{0, 1e-4, 0.5, 0.25}, {1, 5e-5, 0.125, 0.0625}};
  EXPECT_EQ(format_history(h), "0,0.0001,0.5,0.25\n1,5e-05,0.125,0.0625\n");
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.validate();
  c.batch_size = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.patience = c.max_epochs + 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.cosine_T = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Fit, DeterministicHistoryAndBestRestored) {
  PhantomSpec ps;
  const std::vector<MultiModalVolume> train{gen_phantom(ps, 0)}, val{gen_phantom(ps, 1)};
  TrainConfig tc;
  tc.max_epochs = 3;
  tc.patience = 3;
  tc.lr_init = 1e-3;
  tc.seed = 9;
  Network<float> a(network_config_for(tc.ablation, tiny()), 1), b(network_config_for(tc.ablation, tiny()), 1);
  const auto ra = fit(a, train, val, tc), rb = fit(b, train, val, tc);
  ASSERT_EQ(ra.history.size(), 3u);
  EXPECT_EQ(format_history(ra.history), format_history(rb.history));
  EXPECT_EQ(snapshot(a), snapshot(b));
  EXPECT_EQ(snapshot(a), ra.best);
  double best = INFINITY;
  for (const auto& r : ra.history) best = std::min(best, r.val_loss);
  EXPECT_EQ(ra.best_val_loss, best);
  EXPECT_EQ(ra.history[ra.best_epoch].val_loss, best);

  // net built for another ablation setting is rejected
  Network<float> wrong(tiny(), 1);
  tc.ablation.use_prior = false;
  EXPECT_THROW(fit(wrong, train, val, tc), ConfigError);
}

TEST(Fit, DefaultConfigLossDecreasesEarly) {
  PhantomSpec ps;
  const std::vector<MultiModalVolume> one{gen_phantom(ps, 0)};
  TrainConfig tc;
  tc.max_epochs = 20;
  tc.patience = 20;
  Network<float> net(network_config_for(tc.ablation), 0);
  const auto r = fit(net, one, one, tc);
  ASSERT_EQ(r.history.size(), 20u);
  int down = 0;
  for (std::size_t e = 1; e < 20; ++e) down += r.history[e].train_loss < r.history[e - 1].train_loss + 1e-4;
  EXPECT_GE(down, 16);  // 80% of 19 transitions, rounded up
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Mc, PropertiesOnRandomNet) {
  Network<float> net(tiny(), 3);
  const auto x = oracle::random_tensor<float>({1, 5, 8, 8, 8}, 4);
  const auto r = mc_infer(net, x, 8, 5);
  EXPECT_EQ(r.n_passes, 8u);
  bool any_var = false;
  const std::array<const Mask*, 3> masks{&r.masks.et, &r.masks.wt, &r.masks.tc};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < r.dims.count(); ++i) {
      const float m = r.mean[c].data[i], v = r.variance[c].data[i];
      ASSERT_GE(m, 0.f);
      ASSERT_LE(m, 1.f);
      ASSERT_GE(v, 0.f);
      ASSERT_LE(v, 0.25f);
      any_var |= v > 0;
      ASSERT_EQ(masks[c]->data[i], m >= 0.5f);
    }
  EXPECT_TRUE(any_var);
  const auto again = mc_infer(net, x, 8, 5);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(again.mean[c].data, r.mean[c].data);

  // reference mean/variance from the same passes, reduced in reverse order
  const std::size_t S = r.dims.count();
  std::vector<double> s1(3 * S, 0), s2(3 * S, 0);
  for (std::size_t p = 8; p-- > 0;) {
    const auto y = net.forward(x, DropoutMode::McActive, derive_seed(5, {p}));
    for (std::size_t i = 0; i < 3 * S; ++i) s1[i] += y[i], s2[i] += double(y[i]) * y[i];
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < S; ++i) {
      const double mean = s1[c * S + i] / 8, var = s2[c * S + i] / 8 - mean * mean;
      ASSERT_NEAR(r.mean[c].data[i], mean, 1e-6);
      ASSERT_NEAR(r.variance[c].data[i], var, 1e-6);
    }
}

TEST(Mc, DegenerateCases) {
  NetworkConfig cfg = tiny();
  cfg.dropout_rate = 0;
  Network<float> net(cfg, 6);
  const auto x = oracle::random_tensor<float>({1, 5, 8, 8, 8}, 7);
  const auto r = mc_infer(net, x, 5, 1);
  const auto det = net.forward(x, DropoutMode::Off);
  const std::size_t S = r.dims.count();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < S; ++i) {
      ASSERT_EQ(r.variance[c].data[i], 0.f);
      ASSERT_NEAR(r.mean[c].data[i], det[c * S + i], 1e-6);
    }
  Network<float> drop(tiny(), 6);
  const auto one = mc_infer(drop, x, 1, 2);
  for (const auto& v : one.variance)
    for (float e : v.data) ASSERT_EQ(e, 0.f);
  const auto off = mc_infer(drop, x, 20, 2, false);
  EXPECT_EQ(off.n_passes, 1u);
  const auto ref = drop.forward(x, DropoutMode::Off);
  for (std::size_t i = 0; i < S; ++i) ASSERT_EQ(off.mean[0].data[i], ref[i]);
  EXPECT_THROW(mc_infer(drop, x, 0, 0), ConfigError);
  EXPECT_EQ(TrainConfig{}.mc_passes, 20u);
}

TEST(EvaluateCase, PerfectAndEmpty) {
  Grid<std::uint8_t> gt({4, 4, 4}, 0);
  gt.at(1, 1, 1) = 4;
  gt.at(1, 2, 1) = 1;
  gt.at(2, 2, 2) = 2;
  McResult mc;
  mc.dims = gt.dims;
  mc.masks = compose_regions(gt);
  const auto good = evaluate_case(mc, gt);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(good.region(c).dice, 1.0);
    EXPECT_EQ(good.region(c).hd.value(), 0.0);
  }
  mc.masks = {Mask(gt.dims, 0), Mask(gt.dims, 0), Mask(gt.dims, 0)};
  const auto bad = evaluate_case(mc, gt);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(bad.region(c).dice, 0.0);
    EXPECT_FALSE(bad.region(c).hd.has_value());
  }
  EXPECT_THROW(evaluate_case(mc, Grid<std::uint8_t>({4, 4, 5}, 0)), ShapeError);
}

TEST(Manifest, PipelineSwitches) {
  const auto full = pipeline_manifest(Ablation{}, NetworkConfig{}, 20);
  EXPECT_EQ(full.front().rfind("input_channels=5", 0), 0u);
  EXPECT_EQ(full.back(), "inference=mc_dropout passes=20");
  Ablation base{false, false, false, false};
  const auto b = pipeline_manifest(base, NetworkConfig{}, 20);
  EXPECT_EQ(b.front().rfind("input_channels=4", 0), 0u);
  EXPECT_EQ(b.back(), "inference=deterministic");
  for (const auto& line : b) {
    EXPECT_EQ(line.find(" aam "), std::string::npos);
    EXPECT_EQ(line.find(" msff "), std::string::npos);
  }
  EXPECT_EQ(network_config_for(base).in_channels, 4u);
  EXPECT_FALSE(network_config_for(base).use_msff);
}
