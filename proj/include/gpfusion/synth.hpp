#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cohort.hpp"
#include "core.hpp"

namespace gpfusion {

enum class SignalStrength { none, weak, strong };

inline std::string_view signal_name(SignalStrength s) {
  switch (s) {
    case SignalStrength::none: return "none";
    case SignalStrength::weak: return "weak";
    case SignalStrength::strong: return "strong";
  }
  return "none";
}

inline SignalStrength parse_signal(std::string_view s) {
  if (s == "none") return SignalStrength::none;
  if (s == "weak") return SignalStrength::weak;
  if (s == "strong") return SignalStrength::strong;
  throw ConfigError("unknown signal strength '" + std::string(s) + "' (expected none, weak or strong)");
}

struct SimConfig {
  int n_patients = 415;
  double event_rate_w48 = 0.24;
  double event_rate_w72 = 0.35;
  double age_mean = 48.8;
  double age_sd = 9.3;
  double edss_mean = 4.8;
  double edss_sd = 1.4;
  double female_frac = 0.535;
  // Per-day observation probability of a daily test session.
  double missingness = 0.5;
  SignalStrength signal_strength = SignalStrength::none;
  // Share of the squared class separation carried by static features.
  double signal_split = 0.5;
  // Total standardized separation for each strength level.
  double weak_effect = 0.5;
  double strong_effect = 1.0;
  // Patients with very sparse app usage (most fail the density filter).
  double sparse_patient_frac = 0.04;
  double static_missing_prob = 0.03;
  std::uint64_t seed = 0;

  [[nodiscard]] double effect() const {
    switch (signal_strength) {
      case SignalStrength::none: return 0.0;
      case SignalStrength::weak: return weak_effect;
      case SignalStrength::strong: return strong_effect;
    }
    return 0.0;
  }

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("SimConfig: ") + name + " must lie in [0,1]");
    };
    if (n_patients < 10) throw ConfigError("SimConfig: n_patients must be >= 10");
    prob(event_rate_w48, "event_rate_w48");
    prob(event_rate_w72, "event_rate_w72");
    prob(female_frac, "female_frac");
    prob(missingness, "missingness");
    prob(signal_split, "signal_split");
    prob(sparse_patient_frac, "sparse_patient_frac");
    prob(static_missing_prob, "static_missing_prob");
    if (!(age_sd >= 0.0) || !(edss_sd >= 0.0)) throw ConfigError("SimConfig: standard deviations must be >= 0");
    if (!(weak_effect >= 0.0) || !(strong_effect >= 0.0)) throw ConfigError("SimConfig: effects must be >= 0");
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"n_patients", n_patients},
            {"event_rate_w48", event_rate_w48},
            {"event_rate_w72", event_rate_w72},
            {"age_mean", age_mean},
            {"age_sd", age_sd},
            {"edss_mean", edss_mean},
            {"edss_sd", edss_sd},
            {"female_frac", female_frac},
            {"missingness", missingness},
            {"signal_strength", signal_name(signal_strength)},
            {"signal_split", signal_split},
            {"weak_effect", weak_effect},
            {"strong_effect", strong_effect},
            {"sparse_patient_frac", sparse_patient_frac},
            {"static_missing_prob", static_missing_prob},
            {"seed", seed}};
  }

  static SimConfig from_json(const nlohmann::json& j) {
    SimConfig c;
    c.n_patients = j.value("n_patients", c.n_patients);
    c.event_rate_w48 = j.value("event_rate_w48", c.event_rate_w48);
    c.event_rate_w72 = j.value("event_rate_w72", c.event_rate_w72);
    c.age_mean = j.value("age_mean", c.age_mean);
    c.age_sd = j.value("age_sd", c.age_sd);
    c.edss_mean = j.value("edss_mean", c.edss_mean);
    c.edss_sd = j.value("edss_sd", c.edss_sd);
    c.female_frac = j.value("female_frac", c.female_frac);
    c.missingness = j.value("missingness", c.missingness);
    c.signal_strength = parse_signal(j.value("signal_strength", std::string("none")));
    c.signal_split = j.value("signal_split", c.signal_split);
    c.weak_effect = j.value("weak_effect", c.weak_effect);
    c.strong_effect = j.value("strong_effect", c.strong_effect);
    c.sparse_patient_frac = j.value("sparse_patient_frac", c.sparse_patient_frac);
    c.static_missing_prob = j.value("static_missing_prob", c.static_missing_prob);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

namespace synth_detail {

struct ChannelProfile {
  ChannelId id;
  double mean;
  double between_sd;   // patient-level spread; unit for signal drift
  double drift_sign;   // direction of progressor drift, 0 = no signal
};

inline const std::array<ChannelProfile, kChannelCount>& channel_profiles() {
  static const std::array<ChannelProfile, kChannelCount> p = {{
      {ChannelId::step_duration_med, 1.10, 0.10, +1.0},
      {ChannelId::step_impulse_med, 0.50, 0.08, 0.0},
      {ChannelId::step_length_med, 0.62, 0.10, -1.0},
      {ChannelId::step_length_sum, 300.0, 80.0, 0.0},
      {ChannelId::step_velocity_med, 0.56, 0.12, -1.0},
      {ChannelId::turn_speed_med, 1.20, 0.30, 0.0},
      {ChannelId::das_fig8_accuracy, 0.70, 0.10, 0.0},
      {ChannelId::pinch_async, 0.08, 0.03, +1.0},
      {ChannelId::pinch_count, 20.0, 5.0, 0.0},
  }};
  return p;
}

inline constexpr double kLatentLengthScale = 10.0;
inline constexpr double kLatentSdFraction = 0.35;  // within-patient wander, in between-sd units
inline constexpr double kNoiseSdFraction = 0.30;

// Lower Cholesky factor of the unit-variance RBF covariance over days 0..84.
inline const Eigen::MatrixXd& latent_factor() {
  static const Eigen::MatrixXd l = [] {
    Eigen::MatrixXd k(kWindowDays, kWindowDays);
    for (int i = 0; i < kWindowDays; ++i)
      for (int j = 0; j < kWindowDays; ++j) {
        const double d = i - j;
        k(i, j) = std::exp(-d * d / (2.0 * kLatentLengthScale * kLatentLengthScale)) + (i == j ? 1e-8 : 0.0);
      }
    return Eigen::MatrixXd(k.llt().matrixL());
  }();
  return l;
}

inline double round_half(double x) { return std::round(2.0 * x) / 2.0; }

}  // namespace synth_detail

// Progressors (w72 label) are shifted on four static features (centered so
// the cohort marginals stay at the configured values) and drift linearly over
// the 12 weeks on four digital channels. Squared separation is divided between
// the two modalities by signal_split.
inline Cohort generate(const SimConfig& cfg) {
  cfg.validate();
  using namespace synth_detail;
  const double effect = cfg.effect();
  const double static_d = effect * std::sqrt(cfg.signal_split) / 2.0;           // per static feature (4)
  const double digital_d = effect * std::sqrt(1.0 - cfg.signal_split) / 2.0;    // per drifting channel (4)
  const Eigen::MatrixXd& lat = latent_factor();
  const double hi_rate = std::max(cfg.event_rate_w48, cfg.event_rate_w72);
  const double lo_rate = std::min(cfg.event_rate_w48, cfg.event_rate_w72);
  const Date start{2018, 6, 1};

  Cohort c;
  c.provenance = "synthetic:seed=" + std::to_string(cfg.seed) + ":signal=" + std::string(signal_name(cfg.signal_strength));
  c.patients.reserve(static_cast<std::size_t>(cfg.n_patients));
  for (int i = 0; i < cfg.n_patients; ++i) {
    Rng rng = make_rng(cfg.seed, "patient/" + std::to_string(i));
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    auto coin = [&](double p) { return ud(rng) < p; };

    PatientRecord p;
    char id[32];
    std::snprintf(id, sizeof id, "SIM%05d", i + 1);
    p.patient_id = id;
    p.enrollment_date = Date::from_days_since_epoch(start.days_since_epoch() +
                                                    std::uniform_int_distribution<int>(0, 899)(rng));

    // Labels: the rarer endpoint is nested in the more common one.
    const bool y_hi = coin(hi_rate);
    const bool y_lo = y_hi && hi_rate > 0.0 && coin(lo_rate / hi_rate);
    const bool w72_first = cfg.event_rate_w72 >= cfg.event_rate_w48;
    p.label_w72 = w72_first ? y_hi : y_lo;
    p.label_w48 = w72_first ? y_lo : y_hi;
    const double centered = (*p.label_w72 ? 1.0 : 0.0) - cfg.event_rate_w72;
    const double s_shift = static_d * centered;

    auto& s = p.static_features;
    s.sex = coin(cfg.female_frac) ? "F" : "M";
    s[NumericField::age] = std::clamp(cfg.age_mean + cfg.age_sd * nd(rng), 18.0, 80.0);
    s[NumericField::bmi] = std::clamp(25.0 + 4.5 * nd(rng), 15.0, 45.0);
    const double edss = std::clamp(round_half(cfg.edss_mean + cfg.edss_sd * (nd(rng) + s_shift)), 0.0, 10.0);
    s[NumericField::edss] = edss;
    const double ez = cfg.edss_sd > 0.0 ? (edss - cfg.edss_mean) / cfg.edss_sd : 0.0;
    for (auto f : {NumericField::fs_pyramidal, NumericField::fs_cerebellar, NumericField::fs_brainstem,
                   NumericField::fs_sensory, NumericField::fs_bowel_bladder, NumericField::fs_visual,
                   NumericField::fs_cerebral})
      s[f] = std::clamp(std::round(2.0 + 0.8 * ez + 0.9 * nd(rng)), 0.0, 6.0);
    s[NumericField::fs_ambulation] = std::clamp(std::round(3.0 + 1.5 * ez + 1.0 * nd(rng)), 0.0, 12.0);
    s[NumericField::t25fwt] = std::exp(std::log(6.5) + 0.3 * (0.4 * ez + nd(rng) + s_shift));
    const double nhpt = std::exp(std::log(24.0) + 0.2 * (0.3 * ez + nd(rng) + s_shift));
    const double spread = 0.5 + std::abs(2.0 * nd(rng));
    const double nmin = nhpt - spread / 2.0, nmax = nhpt + spread / 2.0;
    s[NumericField::nhpt_avg] = nhpt;
    s[NumericField::nhpt_min] = nmin;
    s[NumericField::nhpt_max] = nmax;
    s[NumericField::nhpt_range] = nmax - nmin;
    s[NumericField::sdmt] = std::max(0.0, 48.0 + 11.0 * (nd(rng) - s_shift));
    s[NumericField::num_relapses] = static_cast<double>(std::poisson_distribution<int>(0.8)(rng));
    s[NumericField::onset_years] = std::max(0.5, 13.0 + 8.0 * nd(rng));
    s[NumericField::vol_cerebellar_wm] = std::max(0.0, 27000.0 + 3500.0 * nd(rng));
    s[NumericField::vol_cerebral_wm] = std::max(0.0, 440000.0 + 50000.0 * nd(rng));
    s[NumericField::vol_t2_lesion] = std::exp(std::log(9000.0) + 0.8 * nd(rng));
    s[NumericField::vol_thalamic] = std::max(0.0, 14000.0 + 1800.0 * nd(rng));
    for (auto f : {NumericField::bmi, NumericField::sdmt, NumericField::onset_years,
                   NumericField::vol_cerebellar_wm, NumericField::vol_cerebral_wm,
                   NumericField::vol_t2_lesion, NumericField::vol_thalamic})
      if (coin(cfg.static_missing_prob)) s[f].reset();
    if (coin(cfg.static_missing_prob))
      for (auto f : {NumericField::nhpt_avg, NumericField::nhpt_min, NumericField::nhpt_max,
                     NumericField::nhpt_range})
        s[f].reset();

    // Session masks: one gait session and one upper-limb session per day.
    const double p_obs = coin(cfg.sparse_patient_frac) ? cfg.missingness * 0.1 : cfg.missingness;
    std::array<bool, kWindowDays> gait_mask{}, hand_mask{};
    for (int d = 0; d < kWindowDays; ++d) {
      gait_mask[static_cast<std::size_t>(d)] = coin(p_obs);
      hand_mask[static_cast<std::size_t>(d)] = coin(p_obs);
    }
    const bool progressor = *p.label_w72;
    for (const auto& prof : channel_profiles()) {
      Eigen::VectorXd z(kWindowDays);
      for (int d = 0; d < kWindowDays; ++d) z(d) = nd(rng);
      const Eigen::VectorXd latent = lat * z;
      const double level = prof.mean + prof.between_sd * nd(rng);
      const auto& mask = is_gait_channel(prof.id) ? gait_mask : hand_mask;
      DigitalChannel ch;
      ch.id = prof.id;
      for (int d = 0; d < kWindowDays; ++d) {
        const double noise = nd(rng);
        if (!mask[static_cast<std::size_t>(d)]) continue;
        // Ramp from 0 to 2*digital_d between-sd units: mean shift digital_d.
        const double drift = progressor ? prof.drift_sign * 2.0 * digital_d * d / double(kLastDay) : 0.0;
        const double v = level + prof.between_sd * (kLatentSdFraction * latent(d) + drift) +
                         prof.between_sd * kNoiseSdFraction * noise;
        ch.samples.push_back({d, v});
      }
      p.channels.push_back(std::move(ch));
    }
    c.patients.push_back(std::move(p));
  }
  return c;
}

// Realized marginals of a generated cohort alongside its config.
inline nlohmann::json sim_manifest(const Cohort& c, const SimConfig& cfg) {
  auto stats = [&](NumericField f) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& p : c.patients)
      if (auto v = p.static_features[f]) {
        sum += *v;
        sq += *v * *v;
        ++n;
      }
    const double mean = n ? sum / double(n) : 0.0;
    const double var = n ? std::max(0.0, sq / double(n) - mean * mean) : 0.0;
    return std::pair{mean, std::sqrt(var)};
  };
  std::size_t female = 0, w48 = 0, w72 = 0, obs = 0;
  for (const auto& p : c.patients) {
    female += p.static_features.sex == "F";
    w48 += p.label_w48.value_or(false);
    w72 += p.label_w72.value_or(false);
    for (const auto& ch : p.channels) obs += ch.samples.size();
  }
  const double n = static_cast<double>(std::max<std::size_t>(c.size(), 1));
  const auto [age_m, age_s] = stats(NumericField::age);
  const auto [edss_m, edss_s] = stats(NumericField::edss);
  return {{"config", cfg.to_json()},
          {"realized",
           {{"n_patients", c.size()},
            {"age_mean", age_m},
            {"age_sd", age_s},
            {"edss_mean", edss_m},
            {"edss_sd", edss_s},
            {"female_frac", double(female) / n},
            {"event_rate_w48", double(w48) / n},
            {"event_rate_w72", double(w72) / n},
            {"observation_fraction", double(obs) / (n * kChannelCount * kWindowDays)}}}};
}

}  // namespace gpfusion
