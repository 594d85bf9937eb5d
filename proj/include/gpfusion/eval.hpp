#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core.hpp"

namespace gpfusion {

inline void require_both_classes_eval(const std::vector<bool>& labels, std::string_view who) {
  const auto pos = std::count(labels.begin(), labels.end(), true);
  if (pos == 0 || pos == static_cast<long>(labels.size()))
    throw Error(std::string(who) + ": needs at least one positive and one negative label");
}

// Mann-Whitney formulation: midranks for ties, so tied positive/negative pairs
// contribute 1/2.
inline double auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw Error("auroc: size mismatch");
  require_both_classes_eval(labels, "auroc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;  // sum of (1-based) midranks of positives
  double n_pos = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        rank_sum_pos += midrank;
        n_pos += 1.0;
      }
    i = j;
  }
  const double n_neg = static_cast<double>(labels.size()) - n_pos;
  const double u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
  return u / (n_pos * n_neg);
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

// Tie-aware ROC: tied scores move along one diagonal segment.
inline std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                       const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw Error("roc_curve: size mismatch");
  require_both_classes_eval(labels, "roc_curve");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double p = static_cast<double>(std::count(labels.begin(), labels.end(), true));
  const double n = static_cast<double>(labels.size()) - p;
  std::vector<RocPoint> pts = {{0.0, 0.0}};
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? tp : fp) += 1.0;
      ++j;
    }
    pts.push_back({fp / n, tp / p});
    i = j;
  }
  return pts;
}

inline double trapezoid_area(const std::vector<RocPoint>& pts) {
  double a = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    a += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2.0;
  return a;
}

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// Stratified k-fold: each class is shuffled and dealt round-robin so per-fold
// class counts differ by at most one.
inline std::vector<Fold> stratified_kfold(const std::vector<bool>& labels, int k, std::uint64_t seed) {
  if (k < 2) throw Error("stratified_kfold: k must be >= 2");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  if (pos.size() < static_cast<std::size_t>(k) || neg.size() < static_cast<std::size_t>(k))
    throw Error("stratified_kfold: each class needs at least k=" + std::to_string(k) + " members");
  Rng rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  std::vector<int> fold_of(labels.size());
  std::size_t slot = 0;
  for (auto i : pos) fold_of[i] = static_cast<int>(slot++ % static_cast<std::size_t>(k));
  for (auto i : neg) fold_of[i] = static_cast<int>(slot++ % static_cast<std::size_t>(k));
  std::vector<Fold> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (int f = 0; f < k; ++f)
      (fold_of[i] == f ? folds[static_cast<std::size_t>(f)].validation
                       : folds[static_cast<std::size_t>(f)].train)
          .push_back(i);
  return folds;
}

struct EvalReport {
  double auroc = 0.5;
  std::vector<RocPoint> roc_points;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  nlohmann::json split_descriptor = nlohmann::json::object();
  std::string config_fingerprint;
  nlohmann::json details = nlohmann::json::object();  // funnel, model selection, ...

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json roc = nlohmann::json::array();
    for (const auto& p : roc_points) roc.push_back({p.fpr, p.tpr});
    return {{"auroc", auroc},
            {"roc_points", roc},
            {"n_pos", n_pos},
            {"n_neg", n_neg},
            {"split", split_descriptor},
            {"config_fingerprint", config_fingerprint},
            {"details", details}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.auroc = j.at("auroc").get<double>();
    for (const auto& p : j.at("roc_points")) r.roc_points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    r.n_pos = j.at("n_pos").get<std::size_t>();
    r.n_neg = j.at("n_neg").get<std::size_t>();
    r.split_descriptor = j.at("split");
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    r.details = j.value("details", nlohmann::json::object());
    return r;
  }
};

inline EvalReport make_report(const std::vector<double>& scores, const std::vector<bool>& labels) {
  EvalReport r;
  r.auroc = auroc(scores, labels);
  r.roc_points = roc_curve(scores, labels);
  r.n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  r.n_neg = labels.size() - r.n_pos;
  return r;
}

}  // namespace gpfusion
