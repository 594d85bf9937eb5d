#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gpfusion/features.hpp"
#include "oracles.hpp"

using namespace gpfusion;

namespace {

FeatureTable table_from(const std::vector<std::vector<double>>& cols) {
  FeatureTable t;
  const auto rows = cols.at(0).size();
  t.matrix.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    t.column_names.push_back("c" + std::to_string(j));
    for (std::size_t i = 0; i < rows; ++i)
      t.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cols[j][i];
  }
  for (std::size_t i = 0; i < rows; ++i) t.row_ids.push_back("r" + std::to_string(i));
  return t;
}

// Straightforward per-window recomputation using textbook formulas.
std::vector<double> recompute(const std::vector<double>& x, int len, int stride) {
  std::vector<double> out;
  for (int start = 0; start + len <= static_cast<int>(x.size()); start += stride) {
    std::vector<double> ts, vs;
    for (int d = start; d < start + len; ++d) {
      ts.push_back(d);
      vs.push_back(x[static_cast<std::size_t>(d)]);
    }
    const double n = len;
    double st = 0, sv = 0, stt = 0, stv = 0, svv = 0;
    for (int i = 0; i < len; ++i) {
      st += ts[i]; sv += vs[i]; stt += ts[i] * ts[i]; stv += ts[i] * vs[i]; svv += vs[i] * vs[i];
    }
    out.push_back(sv / n);
    out.push_back(svv / n - (sv / n) * (sv / n));
    out.push_back((n * stv - st * sv) / (n * stt - st * st));
  }
  return out;
}

}  // namespace

TEST(Windowed, ConstantTrajectory) {
  const std::vector<double> x(85, 3.5);
  const auto f = windowed_features(x, WindowSpec{});
  ASSERT_EQ(f.values.size(), 9u);
  for (std::size_t k = 0; k < f.values.size(); ++k) {
    if (f.names[k].ends_with("variance") || f.names[k].ends_with("slope")) EXPECT_EQ(f.values[k], 0.0);
    else EXPECT_EQ(f.values[k], 3.5);
  }
}

TEST(Windowed, IdentityLine) {
  std::vector<double> x(85);
  for (int d = 0; d < 85; ++d) x[static_cast<std::size_t>(d)] = d;
  const auto f = windowed_features(x, WindowSpec{10, 7, {WindowStat::slope, WindowStat::variance}});
  for (std::size_t k = 0; k < f.values.size(); k += 2) {
    EXPECT_NEAR(f.values[k], 1.0, 1e-12);
    EXPECT_NEAR(f.values[k + 1], (10.0 * 10.0 - 1.0) / 12.0, 1e-9);  // variance of 10 consecutive ints
  }
}

TEST(Windowed, MatchesRecomputation) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::vector<double> x(85);
  for (auto& v : x) v = nd(rng);
  const auto f = windowed_features(x, WindowSpec{28, 28, {WindowStat::mean, WindowStat::variance, WindowStat::slope}}, "step");
  const auto ref = recompute(x, 28, 28);
  ASSERT_EQ(f.values.size(), 9u);
  ASSERT_EQ(ref.size(), 9u);
  for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_NEAR(f.values[k], ref[k], 1e-10);
  EXPECT_EQ(f.names[0], "step:w0:mean");
  EXPECT_EQ(f.names[8], "step:w2:slope");
}

TEST(Windowed, OutputLengthFormula) {
  std::vector<double> x(85, 1.0);
  for (int len : {2, 5, 28, 40, 85})
    for (int stride : {1, 3, 28}) {
      WindowSpec s{len, stride, {WindowStat::mean, WindowStat::slope}};
      EXPECT_EQ(windowed_features(x, s).values.size(),
                static_cast<std::size_t>(((85 - len) / stride + 1) * 2));
    }
}

TEST(Windowed, OverlongWindowFallsBack) {
  std::vector<double> x(85, 1.0);
  const auto f = windowed_features(x, WindowSpec{100, 10, {WindowStat::mean}});
  EXPECT_EQ(f.values.size(), 1u);
  EXPECT_FALSE(f.warnings.empty());
}

TEST(Anova, HandExample) {
  // Groups {1,3} (negative) vs {2,4} (positive).
  const auto t = table_from({{1, 3, 2, 4}});
  const std::vector<bool> y = {false, false, true, true};
  EXPECT_NEAR(anova_f(t, y)[0], 0.5, 1e-12);
}

TEST(Anova, SentinelsAndErrors) {
  const std::vector<bool> y = {false, true, false, true, true};
  const auto t = table_from({{0, 1, 0, 1, 1}, {2, 2, 2, 2, 2}});
  const auto f = anova_f(t, y);
  EXPECT_TRUE(std::isinf(f[0]) && f[0] > 0);
  EXPECT_EQ(f[1], 0.0);
  EXPECT_THROW(anova_f(t, {true, true, true, true, true}), Error);
  EXPECT_EQ(top_k_by_f(f, 1), std::vector<std::size_t>{0});
}

TEST(Anova, MatchesPooledTOracleAndIsScaleFree) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 8 + rng() % 40;
    std::vector<bool> y(n);
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = i % 3 == 0;
      x[i] = nd(rng) + (y[i] ? 0.5 : 0.0);
    }
    std::vector<double> xs;
    for (double v : x) xs.push_back(-3.7 * v + 12.0);
    const auto f = anova_f(table_from({x, xs}), y);
    const double ref = oracle::two_group_f(x, y);
    EXPECT_NEAR(f[0], ref, 1e-9 * std::max(1.0, ref));
    EXPECT_NEAR(f[1], f[0], 1e-9 * std::max(1.0, f[0]));
  }
}

TEST(Rfe, KeepAllIsIdentity) {
  const auto t = table_from({{1, 2, 3, 4}, {0, 1, 0, 1}, {5, 3, 2, 2}});
  const auto r = rfe(t, {false, false, true, true}, 3);
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Rfe, DuplicateInformativeColumnsKeepExactlyOne) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::vector<double> a, noise;
  std::vector<bool> y;
  for (int i = 0; i < 60; ++i) {
    y.push_back(i % 2 == 0);
    a.push_back((y.back() ? 1.0 : 0.0) + 0.3 * nd(rng));
    noise.push_back(nd(rng));
  }
  const auto r = rfe(table_from({a, a, noise}), y, 1);
  ASSERT_EQ(r.selected.size(), 1u);
  EXPECT_EQ(r.selected[0], 1u);  // lower index dropped first on the tie
}

TEST(Rfe, RecoversPlantedColumn) {
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<std::vector<double>> cols(6);
    std::vector<bool> y;
    const std::size_t planted = seed % cols.size();
    for (int i = 0; i < 80; ++i) {
      y.push_back(rng() % 3 == 0);
      for (std::size_t j = 0; j < cols.size(); ++j)
        cols[j].push_back(j == planted ? (y.back() ? 1.0 : 0.0) + 0.3 * nd(rng) : nd(rng));
    }
    const auto r = rfe(table_from(cols), y, 1);
    ASSERT_EQ(r.selected.size(), 1u);
    hits += r.selected[0] == planted;
  }
  EXPECT_EQ(hits, 30);
}

TEST(Logistic, SingleFeatureEqualToLabel) {
  const auto t = table_from({{1, 0, 1, 0, 0, 1, 1, 0}});
  const std::vector<bool> y = {true, false, true, false, false, true, true, false};
  LogisticFitInfo info;
  const auto m = fit_logistic(t, y, {1.0, 5000, 1e-8}, &info);
  EXPECT_GT(m.weights(0), 0.0);
  EXPECT_TRUE(info.converged);
  // Independent gradient evaluation at the returned solution.
  double gw = 0, gb = 0;
  for (int i = 0; i < 8; ++i) {
    const double p = 1 / (1 + std::exp(-(m.weights(0) * t.matrix(i, 0) + m.bias)));
    gw += (p - y[static_cast<std::size_t>(i)]) * t.matrix(i, 0) / 8;
    gb += (p - y[static_cast<std::size_t>(i)]) / 8;
  }
  gw += 1.0 * m.weights(0);
  EXPECT_LT(std::max(std::abs(gw), std::abs(gb)), 1e-8);
}

TEST(Logistic, SingleClassIsAnError) {
  const auto t = table_from({{1, 2, 3}});
  EXPECT_THROW(fit_logistic(t, {true, true, true}, {}), Error);
}

TEST(Logistic, ZeroFeaturesGivesBaseRateLogOdds) {
  FeatureTable t;
  t.matrix.resize(10, 0);
  for (int i = 0; i < 10; ++i) t.row_ids.push_back(std::to_string(i));
  std::vector<bool> y(10, false);
  y[0] = y[3] = y[7] = true;
  const auto m = fit_logistic(t, y, {0.0, 5000, 1e-10});
  EXPECT_NEAR(m.bias, std::log(0.3 / 0.7), 1e-8);
}

TEST(Logistic, SeparableWithoutPenaltyHitsIterationCap) {
  const auto t = table_from({{-2, -1, 1, 2}});
  LogisticFitInfo info;
  fit_logistic(t, {false, false, true, true}, {0.0, 200, 1e-12}, &info);
  EXPECT_FALSE(info.converged);
  EXPECT_EQ(info.iterations, 200);
}

TEST(Logistic, PredictExamples) {
  LogisticModel zero;
  zero.weights = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd x(2, 2);
  x << 1.0, -2.0, 0.5, 3.0;
  for (double p : predict_logistic(zero, x)) EXPECT_EQ(p, 0.5);

  LogisticModel m;
  m.weights = Eigen::Vector2d(0.5, -1.0);
  m.bias = 0.25;
  const auto p = predict_logistic(m, x);
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-(0.5 + 2.0 + 0.25))), 1e-15);
  EXPECT_NEAR(p[1], 1.0 / (1.0 + std::exp(-(0.25 - 3.0 + 0.25))), 1e-15);

  Eigen::MatrixXd up = x;
  up(0, 0) += 1.0;
  EXPECT_GT(predict_logistic(m, up)[0], p[0]);
}

TEST(Logistic, RescalingColumnAndWeightIsInvariant) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd x(20, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
  LogisticModel m;
  m.weights = Eigen::Vector3d(0.3, -1.2, 0.8);
  m.bias = -0.1;
  const auto p = predict_logistic(m, x);
  const double c = 7.5;
  x.col(1) *= c;
  m.weights(1) /= c;
  const auto q = predict_logistic(m, x);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
}
