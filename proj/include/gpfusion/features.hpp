#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cohort.hpp"
#include "feature_table.hpp"
#include "logistic.hpp"

namespace gpfusion {

enum class WindowStat { mean, variance, slope, intercept };

inline std::string_view stat_name(WindowStat s) {
  switch (s) {
    case WindowStat::mean: return "mean";
    case WindowStat::variance: return "variance";
    case WindowStat::slope: return "slope";
    case WindowStat::intercept: return "intercept";
  }
  return "?";
}

inline WindowStat parse_window_stat(std::string_view s) {
  for (auto w : {WindowStat::mean, WindowStat::variance, WindowStat::slope, WindowStat::intercept})
    if (stat_name(w) == s) return w;
  throw ConfigError("unknown window statistic '" + std::string(s) + "'");
}

struct WindowSpec {
  int window_length = 28;
  int stride = 28;
  std::vector<WindowStat> statistics = {WindowStat::mean, WindowStat::variance, WindowStat::slope};

  void validate() const {
    if (stride < 1) throw ConfigError("WindowSpec: stride must be >= 1");
    if (window_length < 1) throw ConfigError("WindowSpec: window_length must be >= 1");
    const bool needs_line =
        std::any_of(statistics.begin(), statistics.end(), [](WindowStat s) {
          return s == WindowStat::slope || s == WindowStat::intercept;
        });
    if (needs_line && window_length < 2)
      throw ConfigError("WindowSpec: slope needs window_length >= 2");
  }

  [[nodiscard]] int window_count(int length = kWindowDays) const {
    if (window_length > length) return 1;
    return (length - window_length) / stride + 1;
  }
};

struct NamedFeatures {
  std::vector<std::string> names;
  std::vector<double> values;
  std::vector<std::string> warnings;
};

// Per-window mean, population variance and least-squares line (value vs day)
// over a dense trajectory. Feature names are "<prefix>:w<k>:<stat>".
inline NamedFeatures windowed_features(const std::vector<double>& trajectory, const WindowSpec& spec,
                                       std::string_view prefix = "ts") {
  spec.validate();
  NamedFeatures out;
  const int length = static_cast<int>(trajectory.size());
  int wlen = spec.window_length;
  if (wlen > length) {
    out.warnings.push_back("window length " + std::to_string(wlen) +
                           " exceeds trajectory length " + std::to_string(length) +
                           "; using one full-length window");
    log_warn(out.warnings.back());
    wlen = length;
  }
  const int windows = spec.window_count(length);
  for (int w = 0; w < windows; ++w) {
    const int start = w * spec.stride;
    double mean = 0.0, tmean = 0.0;
    for (int i = 0; i < wlen; ++i) {
      mean += trajectory[static_cast<std::size_t>(start + i)];
      tmean += start + i;
    }
    mean /= wlen;
    tmean /= wlen;
    double var = 0.0, sxy = 0.0, sxx = 0.0;
    for (int i = 0; i < wlen; ++i) {
      const double dv = trajectory[static_cast<std::size_t>(start + i)] - mean;
      const double dt = (start + i) - tmean;
      var += dv * dv;
      sxy += dt * dv;
      sxx += dt * dt;
    }
    var /= wlen;
    const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
    for (auto st : spec.statistics) {
      double v = 0.0;
      switch (st) {
        case WindowStat::mean: v = mean; break;
        case WindowStat::variance: v = var; break;
        case WindowStat::slope: v = slope; break;
        case WindowStat::intercept: v = mean - slope * tmean; break;
      }
      out.names.push_back(std::string(prefix) + ":w" + std::to_string(w) + ":" +
                          std::string(stat_name(st)));
      out.values.push_back(v);
    }
  }
  return out;
}

// Two-group one-way ANOVA F per column. Perfect separation (no within-group
// variance, nonzero between-group variance) yields +infinity; a column with no
// variance at all yields 0.
inline std::vector<double> anova_f(const FeatureTable& features, const std::vector<bool>& labels) {
  require_both_classes(labels, "anova_f");
  if (static_cast<std::size_t>(features.rows()) != labels.size())
    throw Error("anova_f: label count does not match rows");
  const auto n = static_cast<double>(labels.size());
  const double n1 = static_cast<double>(std::count(labels.begin(), labels.end(), true));
  const double n0 = n - n1;
  std::vector<double> f(static_cast<std::size_t>(features.cols()));
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    const auto col = features.matrix.col(j);
    double s1 = 0.0, s0 = 0.0;
    for (Eigen::Index i = 0; i < col.size(); ++i) (labels[static_cast<std::size_t>(i)] ? s1 : s0) += col(i);
    const double m1 = s1 / n1, m0 = s0 / n0, m = (s1 + s0) / n;
    double within = 0.0;
    for (Eigen::Index i = 0; i < col.size(); ++i) {
      const double d = col(i) - (labels[static_cast<std::size_t>(i)] ? m1 : m0);
      within += d * d;
    }
    const double between = n1 * (m1 - m) * (m1 - m) + n0 * (m0 - m) * (m0 - m);
    const double ms_between = between / 1.0;
    const double ms_within = within / (n - 2.0);
    // Relative threshold so that floating-point residue counts as zero.
    const double scale = std::max(1.0, col.cwiseAbs().maxCoeff());
    const double eps = 1e-24 * scale * scale * n;
    double value;
    if (ms_within <= eps) value = ms_between <= eps ? 0.0 : std::numeric_limits<double>::infinity();
    else value = ms_between / ms_within;
    f[static_cast<std::size_t>(j)] = value;
  }
  return f;
}

// Indices of the `keep` largest F values (ties -> lower index), in ascending
// index order.
inline std::vector<std::size_t> top_k_by_f(const std::vector<double>& f, std::size_t keep) {
  std::vector<std::size_t> idx(f.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return f[a] > f[b]; });
  idx.resize(std::min(keep, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct RfeResult {
  std::vector<std::size_t> selected;  // ascending column indices
  std::vector<std::string> warnings;
};

// Recursive feature elimination with the logistic baseline: refit on the
// remaining (standardized) columns, drop the smallest |weight| (lowest index on
// ties), repeat until `keep` columns remain.
inline RfeResult rfe(const FeatureTable& features, const std::vector<bool>& labels, std::size_t keep,
                     const LogisticOptions& opt = {}) {
  if (keep > static_cast<std::size_t>(features.cols()))
    throw Error("rfe: keep exceeds column count");
  require_both_classes(labels, "rfe");
  RfeResult r;
  r.selected.resize(static_cast<std::size_t>(features.cols()));
  std::iota(r.selected.begin(), r.selected.end(), 0);

  // Standardize once; column scaling is independent of which columns remain.
  FeatureTable z = features;
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double m = z.matrix.col(j).mean();
    const double sd = std::sqrt((z.matrix.col(j).array() - m).square().mean());
    z.matrix.col(j) = (z.matrix.col(j).array() - m) / (sd > 0.0 ? sd : 1.0);
  }
  while (r.selected.size() > keep) {
    LogisticFitInfo info;
    const LogisticModel m = fit_logistic(z.select_columns(r.selected), labels, opt, &info);
    if (!m.weights.allFinite()) {
      r.warnings.push_back("rfe: logistic fit diverged with " + std::to_string(r.selected.size()) +
                           " columns; stopping early");
      log_warn(r.warnings.back());
      break;
    }
    std::size_t drop = 0;
    for (std::size_t k = 1; k < r.selected.size(); ++k)
      if (std::abs(m.weights(static_cast<Eigen::Index>(k))) <
          std::abs(m.weights(static_cast<Eigen::Index>(drop))))
        drop = k;
    r.selected.erase(r.selected.begin() + static_cast<long>(drop));
  }
  return r;
}

}  // namespace gpfusion
