#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "gpfusion/gp.hpp"
#include "oracles.hpp"

using namespace gpfusion;

namespace {

std::vector<double> random_days(std::mt19937_64& rng, int n) {
  std::vector<int> all(kWindowDays);
  std::iota(all.begin(), all.end(), 0);
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<double> t(all.begin(), all.begin() + n);
  std::sort(t.begin(), t.end());
  return t;
}

GpHyperparams random_theta(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {std::exp(std::log(0.1) + u(rng) * std::log(100.0)),
          std::exp(std::log(1.0) + u(rng) * std::log(30.0)),
          std::exp(std::log(0.01) + u(rng) * std::log(100.0))};
}

std::vector<double> draw_from_prior(const std::vector<double>& t, const GpHyperparams& th,
                                    std::uint64_t seed) {
  Eigen::LLT<Eigen::MatrixXd> llt(oracle::kernel(t, th.sigma_c2, th.length_scale, th.sigma_n2));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Eigen::VectorXd z(static_cast<Eigen::Index>(t.size()));
  for (auto& v : z) v = nd(rng);
  Eigen::VectorXd y = llt.matrixL() * z;
  return {y.data(), y.data() + y.size()};
}

}  // namespace

TEST(Kernel, ValueExamples) {
  EXPECT_DOUBLE_EQ(kernel_value(3.0, 3.0, true, {1.0, 1.0, 0.1}), 1.1);
  const double l = 2.5;
  EXPECT_NEAR(kernel_value(0.0, l * std::sqrt(2.0), false, {1.0, l, 0.3}), std::exp(-1.0), 1e-15);
  EXPECT_EQ(kernel_value(0.0, 1e6, true, {1.0, 1.0, 0.25}), 0.25);
  EXPECT_EQ(kernel_value(0.0, 1e6, false, {1.0, 1.0, 0.25}), 0.0);
}

TEST(Kernel, MatrixDeltaIsOnIndexNotTime) {
  const GpHyperparams th{2.0, 3.0, 0.5};
  const auto k1 = kernel_matrix({7.0}, th);
  ASSERT_EQ(k1.rows(), 1);
  EXPECT_DOUBLE_EQ(k1(0, 0), 2.5);
  const auto k2 = kernel_matrix({0.0, 0.0}, th);
  EXPECT_DOUBLE_EQ(k2(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(k2(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(k2(0, 0), 2.5);
}

TEST(Kernel, MatrixMatchesBruteForce) {
  std::mt19937_64 rng(11);
  const auto t = random_days(rng, 5);
  const auto th = random_theta(rng);
  const auto k = kernel_matrix(t, th);
  const auto ref = oracle::kernel(t, th.sigma_c2, th.length_scale, th.sigma_n2);
  EXPECT_LT((k - ref).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(k, k.transpose());
}

TEST(Lml, ScalarExamples) {
  EXPECT_NEAR(log_marginal_likelihood({0.0}, {0.0}, {0.75, 1.0, 0.25}), -0.918938533204673, 1e-12);
  EXPECT_NEAR(log_marginal_likelihood({0.0}, {2.0}, {0.75, 1.0, 0.25}), -2.918938533204673, 1e-12);
}

TEST(Lml, MatchesDenseInverseOracle) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    const auto t = random_days(rng, 6);
    const auto th = random_theta(rng);
    const auto y = draw_from_prior(t, th, rng());
    EXPECT_NEAR(log_marginal_likelihood(t, y, th),
                oracle::lml_dense(t, y, th.sigma_c2, th.length_scale, th.sigma_n2), 1e-8);
  }
}

TEST(Lml, AnalyticGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const auto t = random_days(rng, 12);
    const auto th = random_theta(rng);
    const auto y = draw_from_prior(t, th, rng());
    const auto g = lml_with_gradient(t, y, th);
    ASSERT_TRUE(g);
    for (int k = 0; k < 3; ++k) {
      auto up = th.as_array(), dn = th.as_array();
      const double h = 1e-5;
      up[k] *= std::exp(h);
      dn[k] *= std::exp(-h);
      const double fd = (log_marginal_likelihood(t, y, GpHyperparams::from_array(up)) -
                         log_marginal_likelihood(t, y, GpHyperparams::from_array(dn))) / (2 * h);
      EXPECT_NEAR(g->grad_log[k], fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Cholesky, FactorReconstructsJitteredKernel) {
  std::mt19937_64 rng(3);
  const auto t = random_days(rng, 20);
  const auto th = random_theta(rng);
  const auto y = draw_from_prior(t, th, 1);
  const GpFit fit = make_fit(t, y, th);
  Eigen::MatrixXd k = kernel_matrix(t, th);
  k.diagonal().array() += fit.jitter;
  EXPECT_LT((fit.chol * fit.chol.transpose() - k).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Cholesky, EscalatesJitterOnSingularMatrix) {
  // Identical times with negligible noise give a rank-one kernel.
  const std::vector<double> t = {4.0, 4.0, 4.0};
  const GpFit fit = make_fit(t, {1.0, 1.0, 1.0}, {1.0, 5.0, 1e-300});
  EXPECT_GT(fit.jitter, 0.0);
  EXPECT_LE(fit.jitter, 1e-4 * (1.0 + 1e-12));
}

TEST(HeuristicInit, Examples) {
  std::vector<double> t, alternating, line, flat;
  for (int d = 0; d < 20; ++d) {
    t.push_back(d);
    alternating.push_back(d % 2);
    line.push_back(2.0 * d - 3.0);
    flat.push_back(4.2);
  }
  const auto alt = heuristic_init(t, alternating);
  EXPECT_DOUBLE_EQ(alt.initial.sigma_c2, 0.25);
  EXPECT_DOUBLE_EQ(alt.initial.length_scale, 3.0);

  const auto lin = heuristic_init(t, line);
  EXPECT_DOUBLE_EQ(lin.initial.sigma_n2, kSigmaN2Floor);

  const auto fl = heuristic_init(t, flat);
  EXPECT_DOUBLE_EQ(fl.initial.sigma_c2, kSigmaC2Floor);
  EXPECT_DOUBLE_EQ(fl.initial.sigma_n2, kSigmaN2Floor);

  EXPECT_DOUBLE_EQ(alt.lower.sigma_c2, 0.0025);
  EXPECT_DOUBLE_EQ(alt.upper.sigma_c2, 25.0);
  EXPECT_DOUBLE_EQ(alt.lower.length_scale, 0.5);
  EXPECT_DOUBLE_EQ(alt.upper.length_scale, 84.0);
  EXPECT_FALSE(alt.fallback);
  EXPECT_TRUE(heuristic_init({1.0, 5.0}, {0.0, 1.0}).fallback);
}

TEST(FitGp, NeverWorseThanHeuristicStart) {
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 3 + static_cast<int>(rng() % 30);
    const auto t = random_days(rng, n);
    const auto y = draw_from_prior(t, random_theta(rng), rng());
    const auto b = heuristic_init(t, y);
    const GpFit fit = fit_gp(t, y, b, 3, rng());
    EXPECT_GE(fit.lml, log_marginal_likelihood(t, y, b.initial) - 1e-9);
    EXPECT_TRUE(b.contains(fit.theta, 1e-12));
  }
}

TEST(FitGp, RecoversAtLeastTruthLikelihood) {
  std::vector<double> t;
  for (int d = 0; d < 60; ++d) t.push_back(d);
  const GpHyperparams truth{1.0, 5.0, 0.01};
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto y = draw_from_prior(t, truth, 100 + s);
    const GpFit fit = fit_gp(t, y, heuristic_init(t, y), 5, s);
    EXPECT_GE(fit.lml, log_marginal_likelihood(t, y, truth) - 1e-6);
  }
}

TEST(FitGp, SingleObservation) {
  const auto b = heuristic_init({10.0}, {0.7});
  const GpFit fit = fit_gp({10.0}, {0.7}, b, 5, 1);
  EXPECT_GE(fit.lml, log_marginal_likelihood({10.0}, {0.7}, b.initial) - 1e-9);
}

TEST(FitGp, Deterministic) {
  std::mt19937_64 rng(2);
  const auto t = random_days(rng, 25);
  const auto y = draw_from_prior(t, random_theta(rng), 9);
  const auto b = heuristic_init(t, y);
  EXPECT_TRUE(fit_gp(t, y, b, 5, 77) == fit_gp(t, y, b, 5, 77));
}

TEST(Posterior, FarPointRevertsToPrior) {
  const GpHyperparams th{2.0, 3.0, 0.1};
  const GpFit fit = make_fit({0.0, 1.0, 2.0}, {1.0, -0.5, 0.3}, th);
  const auto p = posterior(fit, 2.0 + 10 * 3.0 + 1.0);
  EXPECT_LT(std::abs(p.mean), 1e-6 * std::sqrt(th.sigma_c2));
  EXPECT_NEAR(p.variance, th.sigma_c2 + th.sigma_n2, 1e-6);
}

TEST(Posterior, NoiseFreeInterpolation) {
  const GpFit fit = make_fit({0.0, 5.0, 9.0}, {1.5, -0.5, 0.3}, {1.0, 4.0, 1e-12});
  EXPECT_NEAR(posterior(fit, 5.0).mean, -0.5, 1e-5);
}

TEST(Posterior, MatchesDenseInverseOracle) {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    const auto t = random_days(rng, 6);
    const auto th = random_theta(rng);
    const auto y = draw_from_prior(t, th, rng());
    const GpFit fit = make_fit(t, y, th);
    const double ts = std::uniform_real_distribution<double>(-5, 90)(rng);
    const auto p = posterior(fit, ts);
    const auto ref = oracle::posterior_dense(t, y, th.sigma_c2, th.length_scale, th.sigma_n2, ts);
    EXPECT_NEAR(p.mean, ref.mean, 1e-8);
    EXPECT_NEAR(p.variance, ref.var, 1e-8);
    EXPECT_GE(p.variance, 0.0);
    EXPECT_LE(p.variance, th.sigma_c2 + th.sigma_n2 + 1e-8);
  }
}

TEST(Sampling, FarPointMonteCarloMean) {
  const GpHyperparams th{1.0, 2.0, 0.2};
  const GpFit fit = make_fit({0.0, 1.0}, {2.0, 2.0}, th);
  double sum = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) sum += sample_trajectory(fit, {80.0}, static_cast<std::uint64_t>(i))[0];
  EXPECT_LT(std::abs(sum / n), 3.0 * std::sqrt(th.sigma_c2 + th.sigma_n2) / 100.0);
}

TEST(Sampling, DegenerateFitTracksMean) {
  std::vector<double> t, y;
  for (int d = 0; d < 85; d += 2) {
    t.push_back(d);
    y.push_back(0.0);
  }
  const auto b = heuristic_init(t, y);
  const GpFit fit = fit_gp(t, y, b, 2, 3);
  const std::vector<double> grid = {1.0, 3.0, 41.0};
  const auto s = sample_trajectory(fit, grid, 4);
  for (std::size_t i = 0; i < grid.size(); ++i)
    EXPECT_NEAR(s[i], posterior(fit, grid[i]).mean, 1e-3);
}

TEST(Sampling, DeterministicPerSeedAndJoint) {
  const GpFit fit = make_fit({0.0, 10.0}, {1.0, -1.0}, {1.0, 5.0, 0.05});
  const auto grid = day_grid();
  EXPECT_EQ(sample_trajectory(fit, grid, 5), sample_trajectory(fit, grid, 5));
  EXPECT_NE(sample_trajectory(fit, grid, 5), sample_trajectory(fit, grid, 6));
}

TEST(Completion, AllObservedIsIdentity) {
  DigitalChannel ch{ChannelId::pinch_count, {}};
  for (int d = 0; d <= 84; ++d) ch.samples.push_back({d, std::sin(d * 0.1) + 0.123456789});
  const GpFit fit = make_fit(ch.times(), ch.values(), {1.0, 5.0, 0.1});
  const auto out = complete_trajectory(ch, fit, 1);
  for (int d = 0; d <= 84; ++d) EXPECT_EQ(out[static_cast<std::size_t>(d)], ch.samples[static_cast<std::size_t>(d)].value);
}

TEST(Completion, PreservesObservationsBitwise) {
  std::mt19937_64 rng(99);
  for (int rep = 0; rep < 30; ++rep) {
    DigitalChannel ch{ChannelId::step_length_med, {}};
    const int n = 1 + static_cast<int>(rng() % 40);
    for (double d : random_days(rng, n)) ch.samples.push_back({static_cast<int>(d), std::normal_distribution<double>(50, 9)(rng)});
    const ChannelScaler sc{50.0, 9.0};
    std::vector<double> z;
    for (double v : ch.values()) z.push_back(sc.forward(v));
    const GpFit fit = fit_gp(ch.times(), z, heuristic_init(ch.times(), z), 1, rng());
    const auto out = complete_trajectory(ch, fit, rng(), sc);
    ASSERT_EQ(out.size(), 85u);
    for (const auto& s : ch.samples) EXPECT_EQ(out[static_cast<std::size_t>(s.day)], s.value);
  }
}

TEST(Augment, ClonesCopyLabelsAndDiffer) {
  PatientRecord p;
  p.patient_id = "P1";
  p.label_w48 = true;
  p.label_w72 = false;
  DigitalChannel ch{ChannelId::step_duration_med, {{0, 1.0}, {5, 1.4}, {9, 0.8}}};
  p.channels = {ch, DigitalChannel{ChannelId::pinch_async, {{3, 0.2}}}};
  std::map<ChannelId, ChannelModel> models;
  ChannelModel m{"P1", ch.id, {}, make_fit(ch.times(), ch.values(), {0.5, 4.0, 0.05})};
  models.emplace(ch.id, m);

  EXPECT_TRUE(augment_patient(p, models, 0, 1).records.empty());
  const auto r = augment_patient(p, models, 3, 1);
  ASSERT_EQ(r.records.size(), 3u);
  EXPECT_FALSE(r.warnings.empty());  // pinch_async has no fit
  double maxdist = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& c = r.records[i];
    EXPECT_EQ(c.patient_id, "P1~aug" + std::to_string(i + 1));
    EXPECT_EQ(c.label_w48, p.label_w48);
    EXPECT_EQ(c.label_w72, p.label_w72);
    EXPECT_EQ(c.static_features, p.static_features);
    EXPECT_EQ(c.channel(ChannelId::step_duration_med)->samples.size(), 85u);
    EXPECT_EQ(*c.channel(ChannelId::pinch_async), *p.channel(ChannelId::pinch_async));
    for (std::size_t j = 0; j < i; ++j)
      for (int d = 0; d < 85; ++d)
        maxdist = std::max(maxdist, std::abs(c.channels[0].samples[static_cast<std::size_t>(d)].value -
                                             r.records[j].channels[0].samples[static_cast<std::size_t>(d)].value));
  }
  EXPECT_GT(maxdist, 0.0);
  EXPECT_EQ(p.channels[0], ch);
}

TEST(ChannelModel, JsonRoundTripRefactorizes) {
  DigitalChannel ch{ChannelId::turn_speed_med, {{0, 1.0}, {3, 2.0}, {7, 0.5}, {8, 0.7}}};
  ChannelModel m{"X", ch.id, {1.0, 2.0},
                 fit_gp(ch.times(), ch.values(), heuristic_init(ch.times(), ch.values()), 2, 4)};
  const auto back = ChannelModel::from_json(nlohmann::json::parse(m.to_json().dump()));
  EXPECT_EQ(back.patient_id, "X");
  EXPECT_EQ(back.scaler, m.scaler);
  EXPECT_EQ(back.fit.theta, m.fit.theta);
  EXPECT_NEAR(back.fit.lml, m.fit.lml, 1e-12);
}
