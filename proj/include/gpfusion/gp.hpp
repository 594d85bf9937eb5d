#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cohort.hpp"
#include "core.hpp"
#include "linalg.hpp"

namespace gpfusion {

// Squared-exponential + white-noise kernel parameters.
struct GpHyperparams {
  double sigma_c2 = 1.0;      // output variance
  double length_scale = 1.0;  // days
  double sigma_n2 = 0.1;      // noise variance

  [[nodiscard]] std::array<double, 3> as_array() const {
    return {sigma_c2, length_scale, sigma_n2};
  }
  static GpHyperparams from_array(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }
  [[nodiscard]] bool valid() const {
    return sigma_c2 > 0.0 && length_scale > 0.0 && sigma_n2 > 0.0 && std::isfinite(sigma_c2) &&
           std::isfinite(length_scale) && std::isfinite(sigma_n2);
  }
  [[nodiscard]] nlohmann::json to_json() const {
    return {{"sigma_c2", sigma_c2}, {"length_scale", length_scale}, {"sigma_n2", sigma_n2}};
  }
  static GpHyperparams from_json(const nlohmann::json& j) {
    return {j.at("sigma_c2").get<double>(), j.at("length_scale").get<double>(),
            j.at("sigma_n2").get<double>()};
  }
  friend bool operator==(const GpHyperparams&, const GpHyperparams&) = default;
};

struct GpBounds {
  GpHyperparams lower;
  GpHyperparams upper;
  GpHyperparams initial;
  bool fallback = false;  // heuristics could not be computed (n < 3)

  [[nodiscard]] bool contains(const GpHyperparams& t, double slack = 0.0) const {
    const auto lo = lower.as_array(), hi = upper.as_array(), x = t.as_array();
    for (int k = 0; k < 3; ++k)
      if (x[k] < lo[k] * (1.0 - slack) || x[k] > hi[k] * (1.0 + slack)) return false;
    return true;
  }
  [[nodiscard]] nlohmann::json to_json() const {
    return {{"lower", lower.to_json()},
            {"upper", upper.to_json()},
            {"initial", initial.to_json()},
            {"fallback", fallback}};
  }
  static GpBounds from_json(const nlohmann::json& j) {
    return {GpHyperparams::from_json(j.at("lower")), GpHyperparams::from_json(j.at("upper")),
            GpHyperparams::from_json(j.at("initial")), j.value("fallback", false)};
  }
};

// k(ti, tj) = sc2 * exp(-(ti - tj)^2 / (2 l^2)) + sn2 * [same sample index]
inline double kernel_value(double ti, double tj, bool same_index, const GpHyperparams& theta) {
  const double d = ti - tj;
  return theta.sigma_c2 * std::exp(-d * d / (2.0 * theta.length_scale * theta.length_scale)) +
         (same_index ? theta.sigma_n2 : 0.0);
}

inline Eigen::MatrixXd kernel_matrix(const std::vector<double>& times, const GpHyperparams& theta) {
  const auto n = static_cast<Eigen::Index>(times.size());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    k(i, i) = kernel_value(times[i], times[i], true, theta);
    for (Eigen::Index j = 0; j < i; ++j) k(i, j) = k(j, i) = kernel_value(times[i], times[j], false, theta);
  }
  return k;
}

// Covariances between training times (rows) and query times (columns); query
// points never share a noise index with training samples.
inline Eigen::MatrixXd cross_kernel(const std::vector<double>& times,
                                    const std::vector<double>& query, const GpHyperparams& theta) {
  Eigen::MatrixXd k(static_cast<Eigen::Index>(times.size()), static_cast<Eigen::Index>(query.size()));
  for (std::size_t i = 0; i < times.size(); ++i)
    for (std::size_t j = 0; j < query.size(); ++j)
      k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          kernel_value(times[i], query[j], false, theta);
  return k;
}

struct GpFit {
  GpHyperparams theta;
  GpBounds bounds;
  std::vector<double> times;
  std::vector<double> values;
  Eigen::MatrixXd chol;   // lower factor of K + jitter*I
  Eigen::VectorXd alpha;  // (K + jitter*I)^-1 y
  double jitter = 0.0;
  double lml = 0.0;

  friend bool operator==(const GpFit& a, const GpFit& b) {
    return a.theta == b.theta && a.times == b.times && a.values == b.values && a.chol == b.chol &&
           a.alpha == b.alpha && a.jitter == b.jitter && a.lml == b.lml;
  }
};

namespace detail {

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline void check_lengths(const std::vector<double>& times, const std::vector<double>& values) {
  if (times.size() != values.size()) throw Error("GP: times and values differ in length");
  if (times.empty()) throw Error("GP: at least one observation required");
}

}  // namespace detail

// Factorizes K(theta) for the given data; throws FitError when even the largest
// jitter fails.
inline GpFit make_fit(const std::vector<double>& times, const std::vector<double>& values,
                      const GpHyperparams& theta, const GpBounds& bounds = {}) {
  detail::check_lengths(times, values);
  auto fac = linalg::cholesky_with_jitter(kernel_matrix(times, theta));
  if (!fac) throw FitError("GP: kernel matrix not positive definite after maximum jitter");
  GpFit fit;
  fit.theta = theta;
  fit.bounds = bounds;
  fit.times = times;
  fit.values = values;
  fit.chol = std::move(fac->lower);
  fit.jitter = fac->jitter;
  const Eigen::VectorXd y = detail::to_eigen(values);
  fit.alpha = linalg::cholesky_solve(fit.chol, y);
  const double n = static_cast<double>(times.size());
  fit.lml = -0.5 * y.dot(fit.alpha) - 0.5 * linalg::log_det_from_cholesky(fit.chol) -
            0.5 * n * std::log(2.0 * std::numbers::pi);
  return fit;
}

inline double log_marginal_likelihood(const std::vector<double>& times,
                                      const std::vector<double>& values,
                                      const GpHyperparams& theta) {
  return make_fit(times, values, theta).lml;
}

// LML and its gradient with respect to (log sc2, log l, log sn2), using
// dLML/dtheta = 1/2 tr((alpha alpha^T - K^-1) dK/dtheta).
struct LmlWithGradient {
  double lml = 0.0;
  std::array<double, 3> grad_log{};
};

inline std::optional<LmlWithGradient> lml_with_gradient(const std::vector<double>& times,
                                                        const std::vector<double>& values,
                                                        const GpHyperparams& theta) {
  const auto n = static_cast<Eigen::Index>(times.size());
  const double inv2l2 = 1.0 / (2.0 * theta.length_scale * theta.length_scale);
  Eigen::MatrixXd k(n, n);
  // Daily data: gaps are small integers, so exponentials can be tabulated.
  const bool integral = std::all_of(times.begin(), times.end(), [](double t) {
    return t == std::floor(t) && t >= 0.0 && t <= 512.0;
  });
  std::vector<double> table;
  if (integral) {
    const double span = n ? *std::max_element(times.begin(), times.end()) -
                                *std::min_element(times.begin(), times.end())
                          : 0.0;
    table.resize(static_cast<std::size_t>(span) + 1);
    for (std::size_t g = 0; g < table.size(); ++g)
      table[g] = std::exp(-static_cast<double>(g * g) * inv2l2);
  }
  auto rbf = [&](Eigen::Index i, Eigen::Index j) {
    const double d = times[static_cast<std::size_t>(i)] - times[static_cast<std::size_t>(j)];
    return integral ? table[static_cast<std::size_t>(std::abs(d))] : std::exp(-d * d * inv2l2);
  };
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = j; i < n; ++i) k(i, j) = k(j, i) = theta.sigma_c2 * rbf(i, j);
  k.diagonal().array() += theta.sigma_n2;
  auto fac = linalg::cholesky_with_jitter(k);
  if (!fac) return std::nullopt;
  const Eigen::VectorXd y = detail::to_eigen(values);
  const Eigen::VectorXd alpha = linalg::cholesky_solve(fac->lower, y);
  // K^-1 = L^-T L^-1
  const Eigen::MatrixXd linv = linalg::lower_triangular_inverse(fac->lower);
  const Eigen::MatrixXd kinv = linv.transpose() * linv;
  LmlWithGradient out;
  out.lml = -0.5 * y.dot(alpha) - 0.5 * linalg::log_det_from_cholesky(fac->lower) -
            0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  // With A = alpha alpha^T - K^-1: sums of A.*rbf, A.*rbf.*d^2 and tr(A),
  // accumulated over the lower triangle.
  double s_rbf = 0.0, s_rbf_d2 = 0.0, trace = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double ajj = alpha[j] * alpha[j] - kinv(j, j);
    trace += ajj;
    s_rbf += ajj;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double d = times[static_cast<std::size_t>(i)] - times[static_cast<std::size_t>(j)];
      const double w = 2.0 * (alpha[i] * alpha[j] - kinv(i, j)) * rbf(i, j);
      s_rbf += w;
      s_rbf_d2 += w * d * d;
    }
  }
  out.grad_log[0] = 0.5 * theta.sigma_c2 * s_rbf;
  out.grad_log[1] = theta.sigma_c2 * s_rbf_d2 * inv2l2;
  out.grad_log[2] = 0.5 * theta.sigma_n2 * trace;
  if (!std::isfinite(out.lml)) return std::nullopt;
  return out;
}

inline constexpr double kSigmaC2Floor = 1e-6;
inline constexpr double kSigmaN2Floor = 1e-8;
inline constexpr double kMinLengthScale = 0.5;
inline constexpr double kMaxLengthScale = 84.0;

namespace detail {

inline double population_variance(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size());
}

inline GpBounds bounds_around(const GpHyperparams& init) {
  GpBounds b;
  b.initial = init;
  b.lower = {init.sigma_c2 * 0.01, std::max(kMinLengthScale, init.length_scale * 0.01),
             init.sigma_n2 * 0.01};
  b.upper = {init.sigma_c2 * 100.0, std::min(kMaxLengthScale, init.length_scale * 100.0),
             init.sigma_n2 * 100.0};
  return b;
}

}  // namespace detail

// Initial values from data characteristics: overall variance for sc2, three
// times the median sampling gap for l, and the residual variance of a
// least-squares line for sn2. Bounds are initial x [0.01, 100].
inline GpBounds heuristic_init(const std::vector<double>& times, const std::vector<double>& values) {
  detail::check_lengths(times, values);
  const std::size_t n = times.size();
  GpHyperparams init;
  bool fallback = false;

  init.sigma_c2 = n >= 2 ? detail::population_variance(values) : 1.0;
  init.sigma_c2 = std::max(init.sigma_c2, kSigmaC2Floor);

  if (n >= 2) {
    std::vector<double> gaps;
    for (std::size_t i = 1; i < n; ++i) gaps.push_back(times[i] - times[i - 1]);
    std::nth_element(gaps.begin(), gaps.begin() + static_cast<long>(gaps.size() / 2), gaps.end());
    double med = gaps[gaps.size() / 2];
    if (gaps.size() % 2 == 0) {
      const double lo = *std::max_element(gaps.begin(), gaps.begin() + static_cast<long>(gaps.size() / 2));
      med = 0.5 * (med + lo);
    }
    init.length_scale = 3.0 * med;
  } else {
    init.length_scale = 14.0;
  }
  init.length_scale = std::clamp(init.length_scale, kMinLengthScale, kMaxLengthScale);

  if (n >= 3) {
    const double tm = std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(n);
    const double ym = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sxy += (times[i] - tm) * (values[i] - ym);
      sxx += (times[i] - tm) * (times[i] - tm);
    }
    const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = values[i] - (ym + slope * (times[i] - tm));
      ss += r * r;
    }
    init.sigma_n2 = ss / static_cast<double>(n);
  } else {
    init.sigma_n2 = 0.1 * init.sigma_c2;
    fallback = true;
  }
  init.sigma_n2 = std::max(init.sigma_n2, kSigmaN2Floor);

  GpBounds b = detail::bounds_around(init);
  b.fallback = fallback;
  return b;
}

struct GpOptimizerOptions {
  int max_iterations = 100;
  double projected_gradient_tol = 1e-7;
};

// Maximizes the LML over log-parameters inside the box with a projected BFGS
// iteration and Armijo backtracking. Every accepted step increases the LML, so
// the result is never worse than the starting point.
inline std::optional<GpFit> maximize_lml_from(const std::vector<double>& times,
                                              const std::vector<double>& values,
                                              const GpBounds& bounds, const GpHyperparams& start,
                                              const GpOptimizerOptions& opt) {
  using Vec3 = Eigen::Vector3d;
  Vec3 lo, hi, x;
  {
    const auto l = bounds.lower.as_array(), h = bounds.upper.as_array(), s = start.as_array();
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::log(l[k]);
      hi[k] = std::log(h[k]);
      x[k] = std::clamp(std::log(s[k]), lo[k], hi[k]);
    }
  }
  auto theta_of = [](const Vec3& v) {
    return GpHyperparams{std::exp(v[0]), std::exp(v[1]), std::exp(v[2])};
  };
  auto project = [&](Vec3 v) { return v.cwiseMax(lo).cwiseMin(hi); };
  // Minimize f = -lml; g = gradient of f.
  auto evaluate = [&](const Vec3& v, double& f, Vec3& g) {
    auto r = lml_with_gradient(times, values, theta_of(v));
    if (!r) return false;
    f = -r->lml;
    g = -Vec3(r->grad_log[0], r->grad_log[1], r->grad_log[2]);
    return true;
  };

  double f = 0.0;
  Vec3 g;
  if (!evaluate(x, f, g)) return std::nullopt;
  Eigen::Matrix3d h = Eigen::Matrix3d::Identity();
  constexpr double kMaxStep = 2.0;  // per iteration, in log units
  for (int it = 0; it < opt.max_iterations; ++it) {
    if ((project(x - g) - x).cwiseAbs().maxCoeff() < opt.projected_gradient_tol) break;
    // Variables held at a bound by the gradient are excluded from the step.
    Eigen::Vector3d free = Vec3::Ones();
    for (int k = 0; k < 3; ++k)
      if ((x[k] <= lo[k] && g[k] > 0.0) || (x[k] >= hi[k] && g[k] < 0.0)) free[k] = 0.0;
    Vec3 d = -(free.asDiagonal() * h * free.asDiagonal()) * g;
    if (g.dot(d) >= 0.0) {
      h.setIdentity();
      d = -free.cwiseProduct(g);
    }
    if (const double m = d.cwiseAbs().maxCoeff(); m > kMaxStep) d *= kMaxStep / m;

    double t = 1.0;
    bool accepted = false;
    Vec3 xn, gn;
    double fn = 0.0;
    for (int bt = 0; bt < 50; ++bt) {
      xn = project(x + t * d);
      if (evaluate(xn, fn, gn) && fn <= f + 1e-4 * g.dot(xn - x)) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;
    const Vec3 s = xn - x;
    const Vec3 yv = gn - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::Matrix3d v = Eigen::Matrix3d::Identity() - rho * s * yv.transpose();
      h = v * h * v.transpose() + rho * s * s.transpose();
    }
    const double decrease = f - fn;
    x = xn;
    f = fn;
    g = gn;
    if (decrease <= 1e-14 * std::max(1.0, std::abs(f)) && s.cwiseAbs().maxCoeff() < 1e-9) break;
  }
  return make_fit(times, values, theta_of(x), bounds);
}

// Best of `restarts` local optimizations: the first starts at the heuristic
// initial value, the rest at log-uniform draws within the bounds.
inline GpFit fit_gp(const std::vector<double>& times, const std::vector<double>& values,
                    const GpBounds& bounds, int restarts, std::uint64_t seed,
                    const GpOptimizerOptions& opt = {}) {
  detail::check_lengths(times, values);
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::optional<GpFit> best;
  const int runs = std::max(1, restarts);
  for (int r = 0; r < runs; ++r) {
    GpHyperparams start = bounds.initial;
    if (r > 0) {
      const auto l = bounds.lower.as_array(), h = bounds.upper.as_array();
      std::array<double, 3> s{};
      for (int k = 0; k < 3; ++k)
        s[k] = std::exp(std::log(l[k]) + unit(rng) * (std::log(h[k]) - std::log(l[k])));
      start = GpHyperparams::from_array(s);
    }
    std::optional<GpFit> fit;
    try {
      fit = maximize_lml_from(times, values, bounds, start, opt);
    } catch (const FitError&) {
      fit.reset();
    }
    if (fit && (!best || fit->lml > best->lml)) best = std::move(fit);
  }
  if (!best) throw FitError("GP: every restart failed to factorize the kernel matrix");
  return *best;
}

struct PosteriorPoint {
  double mean = 0.0;
  double variance = 0.0;
};

inline PosteriorPoint posterior(const GpFit& fit, double t_star) {
  const Eigen::MatrixXd ks = cross_kernel(fit.times, {t_star}, fit.theta);
  PosteriorPoint p;
  p.mean = ks.col(0).dot(fit.alpha);
  const Eigen::VectorXd v = fit.chol.triangularView<Eigen::Lower>().solve(ks.col(0));
  p.variance = fit.theta.sigma_c2 + fit.theta.sigma_n2 - v.squaredNorm();
  if (p.variance < 0.0) {
    if (p.variance < -1e-10)
      log_warn("GP posterior variance " + format_double(p.variance) + " clamped to 0");
    p.variance = 0.0;
  }
  return p;
}

struct JointPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Joint posterior over a grid; every grid point carries its own noise term.
inline JointPosterior joint_posterior(const GpFit& fit, const std::vector<double>& grid) {
  const Eigen::MatrixXd ks = cross_kernel(fit.times, grid, fit.theta);
  JointPosterior jp;
  jp.mean = ks.transpose() * fit.alpha;
  const Eigen::MatrixXd v = fit.chol.triangularView<Eigen::Lower>().solve(ks);
  jp.cov = kernel_matrix(grid, fit.theta) - v.transpose() * v;
  jp.cov = 0.5 * (jp.cov + jp.cov.transpose());
  return jp;
}

// Factorized joint posterior over a grid; draw() is cheap once built.
struct PosteriorSampler {
  Eigen::VectorXd mean;
  Eigen::MatrixXd lower;

  PosteriorSampler(const GpFit& fit, const std::vector<double>& grid) {
    if (grid.empty()) throw Error("sample_trajectory: empty grid");
    JointPosterior jp = joint_posterior(fit, grid);
    auto fac = linalg::cholesky_with_jitter(jp.cov);
    if (!fac) throw FitError("sample_trajectory: posterior covariance not factorizable");
    mean = std::move(jp.mean);
    lower = std::move(fac->lower);
  }

  [[nodiscard]] std::vector<double> draw(std::uint64_t seed) const {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd z(mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
    const Eigen::VectorXd s = mean + lower.triangularView<Eigen::Lower>() * z;
    return {s.data(), s.data() + s.size()};
  }
};

// One joint draw from the posterior over `grid`.
inline std::vector<double> sample_trajectory(const GpFit& fit, const std::vector<double>& grid,
                                             std::uint64_t seed) {
  return PosteriorSampler(fit, grid).draw(seed);
}

// Affine map between raw channel values and the standardized scale the GP is
// fitted on.
struct ChannelScaler {
  double mean = 0.0;
  double std = 1.0;

  [[nodiscard]] double forward(double raw) const { return (raw - mean) / std; }
  [[nodiscard]] double inverse(double z) const { return mean + std * z; }
  friend bool operator==(const ChannelScaler&, const ChannelScaler&) = default;
};

inline std::vector<double> day_grid() {
  std::vector<double> g;
  for (int d = kFirstDay; d <= kLastDay; ++d) g.push_back(d);
  return g;
}

// Dense 0..84 trajectory: observed values are copied verbatim, all other days
// come from one joint posterior draw (mapped back through `scaler`).
inline std::vector<double> complete_trajectory(const DigitalChannel& channel, const GpFit& fit,
                                               std::uint64_t seed,
                                               const ChannelScaler& scaler = {}) {
  if (fit.times.size() != channel.samples.size())
    throw Error("complete_trajectory: fit was not trained on this channel's samples");
  std::vector<double> out(kWindowDays, 0.0);
  std::vector<bool> observed(kWindowDays, false);
  for (const auto& s : channel.samples) {
    out[static_cast<std::size_t>(s.day)] = s.value;
    observed[static_cast<std::size_t>(s.day)] = true;
  }
  std::vector<double> missing;
  for (int d = kFirstDay; d <= kLastDay; ++d)
    if (!observed[static_cast<std::size_t>(d)]) missing.push_back(d);
  if (missing.empty()) return out;
  const auto draw = sample_trajectory(fit, missing, seed);
  for (std::size_t i = 0; i < missing.size(); ++i)
    out[static_cast<std::size_t>(missing[i])] = scaler.inverse(draw[i]);
  return out;
}

// Fitted model for one (patient, channel) pair.
struct ChannelModel {
  std::string patient_id;
  ChannelId channel{};
  ChannelScaler scaler;
  GpFit fit;

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"patient_id", patient_id},
            {"channel_id", channel_name(channel)},
            {"theta", fit.theta.to_json()},
            {"bounds", fit.bounds.to_json()},
            {"lml", fit.lml},
            {"times", fit.times},
            {"values", fit.values},
            {"scaler", {{"mean", scaler.mean}, {"std", scaler.std}}}};
  }

  static ChannelModel from_json(const nlohmann::json& j) {
    ChannelModel m;
    m.patient_id = j.at("patient_id").get<std::string>();
    auto ch = channel_from_name(j.at("channel_id").get<std::string>());
    if (!ch) throw ParseError("GP model: unknown channel " + j.at("channel_id").dump());
    m.channel = *ch;
    if (auto it = j.find("scaler"); it != j.end())
      m.scaler = {it->at("mean").get<double>(), it->at("std").get<double>()};
    m.fit = make_fit(j.at("times").get<std::vector<double>>(),
                     j.at("values").get<std::vector<double>>(),
                     GpHyperparams::from_json(j.at("theta")), GpBounds::from_json(j.at("bounds")));
    return m;
  }
};

inline std::string augmented_id(const std::string& source, int k) {
  return source + "~aug" + std::to_string(k);
}

inline bool is_augmented_id(const std::string& id) { return id.find("~aug") != std::string::npos; }

struct AugmentResult {
  std::vector<PatientRecord> records;
  std::vector<std::string> warnings;
};

// n_synthetic clones whose channels are full posterior draws over days 0..84.
// Static features and labels are copied from the source.
inline AugmentResult augment_patient(const PatientRecord& record,
                                     const std::map<ChannelId, ChannelModel>& models,
                                     int n_synthetic, std::uint64_t seed) {
  AugmentResult r;
  const auto grid = day_grid();
  for (int k = 1; k <= n_synthetic; ++k) {
    PatientRecord clone = record;
    clone.patient_id = augmented_id(record.patient_id, k);
    r.records.push_back(std::move(clone));
  }
  for (std::size_t c = 0; c < record.channels.size(); ++c) {
    const ChannelId id = record.channels[c].id;
    auto it = models.find(id);
    if (it == models.end()) {
      if (n_synthetic > 0) {
        r.warnings.push_back("patient '" + record.patient_id + "' channel " + std::string(channel_name(id)) +
                             " has no GP fit; copied unchanged into augmented clones");
        log_warn(r.warnings.back());
      }
      continue;
    }
    if (n_synthetic == 0) continue;
    const PosteriorSampler sampler(it->second.fit, grid);
    for (auto& clone : r.records) {
      const auto draw = sampler.draw(derive_seed(seed, clone.patient_id + "/" + std::string(channel_name(id))));
      auto& ch = clone.channels[c];
      ch.samples.clear();
      for (std::size_t d = 0; d < grid.size(); ++d)
        ch.samples.push_back(Sample{static_cast<int>(d), it->second.scaler.inverse(draw[d])});
    }
  }
  return r;
}

}  // namespace gpfusion
