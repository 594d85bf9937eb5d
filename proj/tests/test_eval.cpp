#include <gtest/gtest.h>

#include <random>
#include <set>

#include "gpfusion/eval.hpp"
#include "oracles.hpp"

using namespace gpfusion;

TEST(Auroc, Identities) {
  EXPECT_EQ(auroc({0.1, 0.2, 0.8, 0.9}, {false, false, true, true}), 1.0);
  EXPECT_EQ(auroc({0.9, 0.8, 0.2, 0.1}, {false, false, true, true}), 0.0);
  EXPECT_EQ(auroc({0.3, 0.3, 0.3, 0.3, 0.3}, {false, true, true, false, false}), 0.5);
  EXPECT_THROW(auroc({0.1, 0.2}, {true, true}), Error);
}

TEST(Auroc, MatchesPairwiseOracleWithHeavyTies) {
  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t n = 2 + rng() % 99;
    const int levels = 1 + static_cast<int>(rng() % 6);
    std::vector<double> s(n);
    std::vector<bool> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rep % 2 ? static_cast<double>(rng() % static_cast<unsigned>(levels))
                     : std::normal_distribution<double>()(rng);
      y[i] = rng() % 3 == 0;
    }
    y[0] = true;
    y[1] = false;
    EXPECT_EQ(auroc(s, y), oracle::auroc_pairwise(s, y));
    EXPECT_NEAR(trapezoid_area(roc_curve(s, y)), oracle::auroc_pairwise(s, y), 1e-12);

    std::vector<double> neg, mono;
    for (double v : s) {
      neg.push_back(-v);
      mono.push_back(std::exp(0.5 * v) + 3.0);
    }
    EXPECT_DOUBLE_EQ(auroc(s, y) + auroc(neg, y), 1.0);
    EXPECT_EQ(auroc(mono, y), auroc(s, y));
  }
}

TEST(Roc, MonotoneFromOriginToOne) {
  const auto pts = roc_curve({0.5, 0.1, 0.5, 0.9, 0.3}, {true, false, false, true, false});
  EXPECT_EQ(pts.front().fpr, 0.0);
  EXPECT_EQ(pts.front().tpr, 0.0);
  EXPECT_EQ(pts.back().fpr, 1.0);
  EXPECT_EQ(pts.back().tpr, 1.0);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    EXPECT_GE(pts[i].fpr, pts[i - 1].fpr);
    EXPECT_GE(pts[i].tpr, pts[i - 1].tpr);
  }
}

TEST(KFold, ExactDivisibility) {
  std::vector<bool> y(10, false);
  for (int i = 0; i < 5; ++i) y[static_cast<std::size_t>(2 * i)] = true;
  const auto folds = stratified_kfold(y, 5, 3);
  ASSERT_EQ(folds.size(), 5u);
  for (const auto& f : folds) {
    int pos = 0;
    for (auto i : f.validation) pos += y[i];
    EXPECT_EQ(pos, 1);
  }
}

TEST(KFold, PartitionBalanceDeterminism) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 20 + rng() % 200;
    std::vector<bool> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = i % 4 == 0 || rng() % 5 == 0;
    const int k = 2 + static_cast<int>(rng() % 5);
    const auto folds = stratified_kfold(y, k, rep);
    std::multiset<std::size_t> seen;
    std::size_t minpos = n, maxpos = 0;
    for (const auto& f : folds) {
      EXPECT_EQ(f.train.size() + f.validation.size(), n);
      seen.insert(f.validation.begin(), f.validation.end());
      std::size_t pos = 0;
      for (auto i : f.validation) pos += y[i];
      minpos = std::min(minpos, pos);
      maxpos = std::max(maxpos, pos);
      std::set<std::size_t> tr(f.train.begin(), f.train.end());
      for (auto i : f.validation) EXPECT_FALSE(tr.count(i));
    }
    EXPECT_EQ(seen.size(), n);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), n);
    EXPECT_LE(maxpos - minpos, 1u);
    const auto again = stratified_kfold(y, k, rep);
    for (std::size_t f = 0; f < folds.size(); ++f) EXPECT_EQ(folds[f].validation, again[f].validation);
  }
}

TEST(KFold, SmallClassIsAnError) {
  EXPECT_THROW(stratified_kfold({true, true, false, false, false, false}, 3, 1), Error);
  EXPECT_THROW(stratified_kfold({true, false}, 1, 1), Error);
}

TEST(Report, JsonRoundTrip) {
  auto r = make_report({0.2, 0.7, 0.4}, {false, true, true});
  r.config_fingerprint = "abc";
  const auto back = EvalReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back.auroc, r.auroc);
  EXPECT_EQ(back.n_pos, 2u);
  EXPECT_EQ(back.roc_points.size(), r.roc_points.size());
  EXPECT_EQ(back.config_fingerprint, "abc");
}
