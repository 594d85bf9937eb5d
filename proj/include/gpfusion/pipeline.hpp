#pragma once

#include <array>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cohort.hpp"
#include "config.hpp"
#include "core.hpp"
#include "encoder.hpp"
#include "eval.hpp"
#include "feature_table.hpp"
#include "features.hpp"
#include "gp.hpp"
#include "logistic.hpp"
#include "transformer.hpp"

namespace gpfusion {

using ChannelScalers = std::array<ChannelScaler, kChannelCount>;

inline nlohmann::json scalers_to_json(const ChannelScalers& s) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t c = 0; c < kChannelCount; ++c)
    j[std::string(kChannelNames[c])] = {{"mean", s[c].mean}, {"std", s[c].std}};
  return j;
}

inline ChannelScalers scalers_from_json(const nlohmann::json& j) {
  ChannelScalers s;
  for (std::size_t c = 0; c < kChannelCount; ++c) {
    const auto& e = j.at(std::string(kChannelNames[c]));
    s[c] = {e.at("mean").get<double>(), e.at("std").get<double>()};
  }
  return s;
}

// Per-channel mean / population std of every observed value in `train`.
inline ChannelScalers fit_channel_scalers(const Cohort& train) {
  ChannelScalers out;
  for (std::size_t c = 0; c < kChannelCount; ++c) {
    double sum = 0.0, n = 0.0;
    for (const auto& p : train.patients)
      if (const auto* ch = p.channel(static_cast<ChannelId>(c)))
        for (const auto& s : ch->samples) {
          sum += s.value;
          n += 1.0;
        }
    if (n == 0.0) continue;
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& p : train.patients)
      if (const auto* ch = p.channel(static_cast<ChannelId>(c)))
        for (const auto& s : ch->samples) ss += (s.value - mean) * (s.value - mean);
    const double sd = std::sqrt(ss / n);
    out[c] = {mean, sd > 0.0 ? sd : 1.0};
  }
  return out;
}

inline bool is_dense(const DigitalChannel& ch) {
  if (ch.samples.size() != static_cast<std::size_t>(kWindowDays)) return false;
  for (int d = 0; d < kWindowDays; ++d)
    if (ch.samples[static_cast<std::size_t>(d)].day != d) return false;
  return true;
}

inline bool is_dense(const PatientRecord& p) {
  for (auto id : all_channels()) {
    const auto* ch = p.channel(id);
    if (!ch || !is_dense(*ch)) return false;
  }
  return true;
}

struct ImputeSummary {
  std::size_t attempted = 0;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  std::size_t already_dense = 0;
  std::size_t empty_channels = 0;
  std::size_t fallback_inits = 0;
  std::size_t augmented_records = 0;
  double lml_sum = 0.0;

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"fits_attempted", attempted},
            {"fits_succeeded", succeeded},
            {"fits_failed", failed},
            {"already_dense", already_dense},
            {"empty_channels", empty_channels},
            {"fallback_initializations", fallback_inits},
            {"augmented_records", augmented_records},
            {"mean_lml", succeeded ? lml_sum / static_cast<double>(succeeded) : 0.0}};
  }
};

struct ImputedCohort {
  Cohort dense;  // every channel observed on days 0..84
  std::vector<ChannelModel> models;
  ImputeSummary summary;
};

inline std::string gp_key(const std::string& pid, ChannelId c) {
  return pid + "/" + std::string(channel_name(c));
}

// Fits one GP per (patient, channel) on scaler-standardized values and
// completes the trajectory. Channels already observed on every day are kept
// as they are. Patients listed in `augment_ids` are followed by
// `opt.augment` synthetic clones.
inline ImputedCohort impute_cohort(const Cohort& c, const ChannelScalers& scalers, const ImputeOptions& opt,
                                   std::uint64_t seed, const std::set<std::string>& augment_ids = {}) {
  ImputedCohort out;
  out.dense.provenance = c.provenance;
  for (const auto& src : c.patients) {
    PatientRecord dense = src;
    dense.channels.clear();
    std::map<ChannelId, ChannelModel> models;
    const bool augment = opt.augment > 0 && augment_ids.count(src.patient_id);
    for (auto id : all_channels()) {
      const auto& scaler = scalers[static_cast<std::size_t>(id)];
      const auto* ch = src.channel(id);
      DigitalChannel filled;
      filled.id = id;
      if (!ch || ch->samples.empty()) {
        ++out.summary.empty_channels;
        for (int d = 0; d < kWindowDays; ++d) filled.samples.push_back({d, scaler.mean});
        dense.channels.push_back(std::move(filled));
        continue;
      }
      if (is_dense(*ch) && !augment) {
        ++out.summary.already_dense;
        dense.channels.push_back(*ch);
        continue;
      }
      const auto times = ch->times();
      std::vector<double> z = ch->values();
      for (auto& v : z) v = scaler.forward(v);
      ++out.summary.attempted;
      try {
        const GpBounds bounds = heuristic_init(times, z);
        out.summary.fallback_inits += bounds.fallback;
        ChannelModel m{src.patient_id, id, scaler,
                       fit_gp(times, z, bounds, opt.restarts, derive_seed(seed, "gp/fit/" + gp_key(src.patient_id, id)),
                              opt.optimizer)};
        const auto traj = complete_trajectory(*ch, m.fit, derive_seed(seed, "gp/complete/" + gp_key(src.patient_id, id)), scaler);
        for (int d = 0; d < kWindowDays; ++d) filled.samples.push_back({d, traj[static_cast<std::size_t>(d)]});
        ++out.summary.succeeded;
        out.summary.lml_sum += m.fit.lml;
        models.emplace(id, m);
        out.models.push_back(std::move(m));
      } catch (const FitError& e) {
        // Keep the observations, hold their mean on the unobserved days.
        ++out.summary.failed;
        log_warn("GP fit failed for " + gp_key(src.patient_id, id) + ": " + e.what());
        const auto vals = ch->values();
        const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
        std::vector<double> traj(kWindowDays, mean);
        for (const auto& s : ch->samples) traj[static_cast<std::size_t>(s.day)] = s.value;
        for (int d = 0; d < kWindowDays; ++d) filled.samples.push_back({d, traj[static_cast<std::size_t>(d)]});
      }
      dense.channels.push_back(std::move(filled));
    }
    out.dense.patients.push_back(dense);
    if (augment && !models.empty()) {
      auto aug = augment_patient(dense, models, opt.augment, derive_seed(seed, "gp/augment/" + src.patient_id));
      out.summary.augmented_records += aug.records.size();
      for (auto& r : aug.records) out.dense.patients.push_back(std::move(r));
    }
  }
  return out;
}

inline std::vector<double> dense_values(const PatientRecord& p, ChannelId id) {
  const auto* ch = p.channel(id);
  if (!ch || !is_dense(*ch))
    throw SchemaError("patient '" + p.patient_id + "' channel " + std::string(channel_name(id)) +
                      " is not a completed 85-day trajectory");
  return ch->values();
}

// Windowed statistics of every channel: columns "<channel>:w<k>:<stat>".
inline FeatureTable window_feature_table(const Cohort& dense, const WindowSpec& spec) {
  FeatureTable t;
  std::vector<std::vector<double>> rows;
  for (const auto& p : dense.patients) {
    std::vector<double> row;
    std::vector<std::string> names;
    for (auto id : all_channels()) {
      auto nf = windowed_features(dense_values(p, id), spec, channel_name(id));
      row.insert(row.end(), nf.values.begin(), nf.values.end());
      names.insert(names.end(), nf.names.begin(), nf.names.end());
    }
    if (t.column_names.empty()) t.column_names = names;
    rows.push_back(std::move(row));
    t.row_ids.push_back(p.patient_id);
  }
  if (t.column_names.empty())
    for (auto id : all_channels())
      for (auto& n : windowed_features(std::vector<double>(kWindowDays, 0.0), spec, channel_name(id)).names)
        t.column_names.push_back(n);
  t.matrix.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.column_names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  t.check();
  return t;
}

// Column standardization fitted on training rows (population std, zero -> 1).
struct FeatureScaler {
  std::vector<std::string> columns;
  Eigen::VectorXd mean, std;

  static FeatureScaler fit(const FeatureTable& t) {
    FeatureScaler s;
    s.columns = t.column_names;
    s.mean = t.matrix.colwise().mean().transpose();
    s.std.resize(t.cols());
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
      const double sd = std::sqrt((t.matrix.col(j).array() - s.mean(j)).square().mean());
      s.std(j) = sd > 0.0 ? sd : 1.0;
    }
    return s;
  }

  [[nodiscard]] FeatureTable apply(FeatureTable t) const {
    if (t.column_names != columns) throw SchemaError("FeatureScaler: column mismatch");
    t.matrix = (t.matrix.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array();
    return t;
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"columns", columns},
            {"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
            {"std", std::vector<double>(std.data(), std.data() + std.size())}};
  }

  static FeatureScaler from_json(const nlohmann::json& j) {
    FeatureScaler s;
    s.columns = j.at("columns").get<std::vector<std::string>>();
    const auto m = j.at("mean").get<std::vector<double>>();
    const auto d = j.at("std").get<std::vector<double>>();
    if (m.size() != s.columns.size() || d.size() != s.columns.size())
      throw SchemaError("feature scaler: length mismatch");
    s.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
    s.std = Eigen::Map<const Eigen::VectorXd>(d.data(), static_cast<Eigen::Index>(d.size()));
    return s;
  }

  friend bool operator==(const FeatureScaler& a, const FeatureScaler& b) {
    return a.columns == b.columns && a.mean.size() == b.mean.size() && a.mean == b.mean && a.std == b.std;
  }
};

// Per-channel standardized T x C tensors plus encoded static rows.
inline TensorSet make_tensors(const Cohort& dense, const ChannelScalers& scalers, const FeatureTable& statics,
                              std::optional<Target> target) {
  TensorSet t;
  t.statics = statics.matrix;
  for (const auto& p : dense.patients) {
    Eigen::MatrixXd x(kWindowDays, static_cast<Eigen::Index>(kChannelCount));
    for (std::size_t c = 0; c < kChannelCount; ++c) {
      const auto v = dense_values(p, static_cast<ChannelId>(c));
      for (int d = 0; d < kWindowDays; ++d)
        x(d, static_cast<Eigen::Index>(c)) = scalers[c].forward(v[static_cast<std::size_t>(d)]);
    }
    t.ts.push_back(std::move(x));
    t.ids.push_back(p.patient_id);
    if (target) {
      const auto y = p.label(*target);
      if (!y) throw SchemaError("patient '" + p.patient_id + "' has no " + std::string(target_name(*target)) + " label");
      t.labels.push_back(*y);
    }
  }
  return t;
}

inline std::vector<bool> labels_of(const Cohort& c, Target target) {
  std::vector<bool> y;
  for (const auto& p : c.patients) {
    const auto l = p.label(target);
    if (!l) throw SchemaError("patient '" + p.patient_id + "' has no " + std::string(target_name(target)) + " label");
    y.push_back(*l);
  }
  return y;
}

// Every statistic estimated from data during a run. None may depend on test rows.
struct FittedStatistics {
  ChannelScalers channel_scalers{};
  EncoderState encoder;
  std::optional<FeatureScaler> feature_scaler;
  std::vector<std::string> selected_features;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j{{"channel_scalers", scalers_to_json(channel_scalers)},
                     {"encoder", encoder.to_json()},
                     {"selected_features", selected_features}};
    j["feature_scaler"] = feature_scaler ? feature_scaler->to_json() : nlohmann::json(nullptr);
    return j;
  }

  static FittedStatistics from_json(const nlohmann::json& j) {
    FittedStatistics s;
    s.channel_scalers = scalers_from_json(j.at("channel_scalers"));
    s.encoder = EncoderState::from_json(j.at("encoder"));
    s.selected_features = j.at("selected_features").get<std::vector<std::string>>();
    if (!j.at("feature_scaler").is_null()) s.feature_scaler = FeatureScaler::from_json(j.at("feature_scaler"));
    return s;
  }

  friend bool operator==(const FittedStatistics& a, const FittedStatistics& b) {
    return a.channel_scalers == b.channel_scalers && a.encoder == b.encoder &&
           a.feature_scaler == b.feature_scaler && a.selected_features == b.selected_features;
  }
};

// Cohort after filtering, split and imputation; the shared front half of
// every pipeline run.
struct PreparedData {
  FilterReport funnel;
  Date cutoff;
  std::size_t dropped_test_clones = 0;
  Cohort train_raw;       // original training patients (no clones)
  ImputedCohort train;    // completed, with clones when augmenting
  ImputedCohort test;     // completed, original patients only
  FittedStatistics stats;
  FeatureTable static_train, static_test;
  std::vector<std::string> warnings;
};

inline Cohort without_clones(const Cohort& c, std::size_t* dropped = nullptr) {
  Cohort out;
  out.provenance = c.provenance;
  for (const auto& p : c.patients)
    if (!is_augmented_id(p.patient_id)) out.patients.push_back(p);
  if (dropped) *dropped = c.size() - out.size();
  return out;
}

inline PreparedData prepare_data(const Cohort& cohort, const RunConfig& cfg) {
  PreparedData d;
  auto [filtered, funnel] = filter_cohort(cohort, cfg.filter.to_filter(cfg.target));
  d.funnel = funnel;
  if (filtered.patients.empty()) throw Error("no patients left after filtering");
  d.cutoff = cfg.cutoff ? *cfg.cutoff : quantile_cutoff(without_clones(filtered), cfg.train_fraction);
  auto split = temporal_split(filtered, d.cutoff);
  d.warnings = split.warnings;
  // Clones already present in the input (an augmented cohort) stay with the
  // training side only; test scoring uses original patients.
  const Cohort test = without_clones(split.test, &d.dropped_test_clones);
  std::set<std::string> train_ids;
  for (const auto& p : split.train.patients)
    if (!is_augmented_id(p.patient_id)) train_ids.insert(p.patient_id);
  d.train_raw = without_clones(split.train);
  if (d.train_raw.patients.empty()) throw Error("empty training split");
  if (test.patients.empty()) throw Error("empty test split");

  d.stats.channel_scalers = fit_channel_scalers(d.train_raw);
  d.stats.encoder = fit_static_encoder(d.train_raw, cfg.encoder);
  d.train = impute_cohort(split.train, d.stats.channel_scalers, cfg.gp, cfg.seed,
                          cfg.gp.augment > 0 ? train_ids : std::set<std::string>{});
  ImputeOptions test_opt = cfg.gp;
  test_opt.augment = 0;
  d.test = impute_cohort(test, d.stats.channel_scalers, test_opt, cfg.seed);
  d.static_train = encode_static(d.train.dense, d.stats.encoder).table;
  d.static_test = encode_static(d.test.dense, d.stats.encoder).table;
  return d;
}

// Stratified folds over original patients; clones follow their source into
// training folds and are never used for validation.
inline std::vector<Fold> grouped_folds(const Cohort& dense_train, const std::vector<bool>& labels, int k,
                                       std::uint64_t seed) {
  std::vector<std::size_t> originals;
  std::map<std::string, std::size_t> source_index;
  for (std::size_t i = 0; i < dense_train.size(); ++i)
    if (!is_augmented_id(dense_train.patients[i].patient_id)) {
      source_index[dense_train.patients[i].patient_id] = originals.size();
      originals.push_back(i);
    }
  std::vector<bool> y;
  for (auto i : originals) y.push_back(labels[i]);
  auto base = stratified_kfold(y, k, seed);
  std::vector<int> fold_of(originals.size());
  for (std::size_t f = 0; f < base.size(); ++f)
    for (auto v : base[f].validation) fold_of[v] = static_cast<int>(f);
  std::vector<Fold> out(base.size());
  for (std::size_t i = 0; i < dense_train.size(); ++i) {
    const auto& id = dense_train.patients[i].patient_id;
    const bool clone = is_augmented_id(id);
    const std::size_t src = source_index.at(clone ? id.substr(0, id.find("~aug")) : id);
    for (std::size_t f = 0; f < out.size(); ++f) {
      if (fold_of[src] != static_cast<int>(f)) out[f].train.push_back(i);
      else if (!clone) out[f].validation.push_back(i);
    }
  }
  return out;
}

inline std::vector<bool> subset_labels(const std::vector<bool>& y, const std::vector<std::size_t>& idx) {
  std::vector<bool> out;
  for (auto i : idx) out.push_back(y[i]);
  return out;
}

// Logistic baseline: windowed (+ static) features, train-fitted scaling,
// ANOVA top-k then RFE, l2 chosen by stratified CV (ties -> larger l2).
struct LogisticPipelineModel {
  FeatureScaler scaler;
  std::vector<std::string> selected;
  LogisticModel model;
  nlohmann::json selection = nlohmann::json::object();
};

inline FeatureTable logistic_features(const Cohort& dense, const FeatureTable& statics,
                                      const RunConfig& cfg) {
  FeatureTable t = window_feature_table(dense, cfg.features.window);
  if (cfg.features.include_static) t = hconcat(t, statics);
  return t;
}

inline LogisticPipelineModel fit_logistic_pipeline(const FeatureTable& train_raw_features, const Cohort& dense_train,
                                                   const std::vector<bool>& y, const RunConfig& cfg) {
  LogisticPipelineModel out;
  out.scaler = FeatureScaler::fit(train_raw_features);
  const FeatureTable z = out.scaler.apply(train_raw_features);
  const auto f = anova_f(z, y);
  const auto top = top_k_by_f(f, std::min<std::size_t>(static_cast<std::size_t>(cfg.features.anova_keep), f.size()));
  const FeatureTable z_top = z.select_columns(top);
  LogisticOptions lo = cfg.logistic;
  const auto r = rfe(z_top, y, std::min<std::size_t>(static_cast<std::size_t>(cfg.features.rfe_keep), top.size()), lo);
  for (auto i : r.selected) out.selected.push_back(z_top.column_names[i]);
  const FeatureTable zs = z.select_columns(out.selected);

  const auto folds = grouped_folds(dense_train, y, cfg.cv_folds, derive_seed(cfg.seed, "cv/logistic"));
  double best_score = -1.0, best_l2 = cfg.l2_grid.front();
  nlohmann::json grid = nlohmann::json::array();
  for (double l2 : cfg.l2_grid) {
    lo.l2 = l2;
    double sum = 0.0;
    for (const auto& fold : folds) {
      const auto m = fit_logistic(zs.select_rows(fold.train), subset_labels(y, fold.train), lo);
      sum += auroc(predict_logistic(m, zs.select_rows(fold.validation)), subset_labels(y, fold.validation));
    }
    const double score = sum / static_cast<double>(folds.size());
    grid.push_back({{"l2", l2}, {"cv_auroc", score}});
    if (score > best_score || (score == best_score && l2 > best_l2)) {
      best_score = score;
      best_l2 = l2;
    }
  }
  lo.l2 = best_l2;
  out.model = fit_logistic(zs, y, lo);
  out.selection = {{"anova_keep", top.size()}, {"selected", out.selected}, {"grid", grid}, {"chosen_l2", best_l2}};
  return out;
}

inline std::vector<double> predict_logistic_pipeline(const LogisticPipelineModel& m, const FeatureTable& raw) {
  return predict_logistic(m.model, m.scaler.apply(raw).select_columns(m.selected));
}

inline ModelConfig with_overrides(ModelConfig mc, TrainConfig& tc, const nlohmann::json& entry) {
  nlohmann::json mj = mc.to_json(), tj = tc.to_json();
  for (auto it = entry.begin(); it != entry.end(); ++it) {
    if (mj.contains(it.key()) && it.key() != "mode" && it.key() != "seed") mj[it.key()] = it.value();
    else if (tj.contains(it.key()) && it.key() != "seed") tj[it.key()] = it.value();
    else throw ConfigError("transformer.grid: unknown override '" + it.key() + "'");
  }
  const auto seed = tc.seed;
  tc = TrainConfig::from_json(tj);
  tc.seed = seed;
  return ModelConfig::from_json(mj);
}

struct TransformerPipelineModel {
  FusionModel model;
  std::vector<EpochRecord> history;
  nlohmann::json selection = nlohmann::json::object();
};

inline TransformerPipelineModel fit_transformer_pipeline(const TensorSet& data, const Cohort& dense_train,
                                                         const RunConfig& cfg) {
  ModelConfig base = cfg.model_config;
  base.channels = static_cast<int>(kChannelCount);
  base.time_steps = kWindowDays;
  base.static_dim = static_cast<int>(data.statics.cols());
  base.mode = cfg.model == ModelKind::unimodal_ts ? FusionMode::unimodal_ts : FusionMode::multimodal;
  base.seed = derive_seed(cfg.seed, "transformer/init");
  TrainConfig base_tc = cfg.train;
  base_tc.seed = derive_seed(cfg.seed, "transformer/train");

  const auto folds = grouped_folds(dense_train, data.labels, cfg.cv_folds, derive_seed(cfg.seed, "cv/transformer"));
  nlohmann::json grid = cfg.transformer_grid.empty() ? nlohmann::json::array({nlohmann::json::object()}) : cfg.transformer_grid;
  TransformerPipelineModel out;
  std::size_t chosen = 0;
  if (grid.size() > 1) {
    double best = -1.0;
    std::size_t best_params = 0;
    nlohmann::json scores = nlohmann::json::array();
    for (std::size_t g = 0; g < grid.size(); ++g) {
      TrainConfig tc = base_tc;
      const ModelConfig mc = with_overrides(base, tc, grid[g]);
      double sum = 0.0;
      for (const auto& fold : folds) {
        const auto r = train(mc, data.subset(fold.train), data.subset(fold.validation), tc);
        sum += r.best_val_auroc.value_or(0.5);
      }
      const double score = sum / static_cast<double>(folds.size());
      const std::size_t params = parameter_count(zero_model(mc));
      scores.push_back({{"overrides", grid[g]}, {"cv_auroc", score}, {"parameters", params}});
      if (score > best || (score == best && params < best_params)) {
        best = score;
        best_params = params;
        chosen = g;
      }
    }
    out.selection["grid"] = scores;
  }
  TrainConfig tc = base_tc;
  const ModelConfig mc = with_overrides(base, tc, grid[chosen]);
  // Final fit: fold 0 held out for early stopping / checkpoint selection.
  const auto r = train(mc, data.subset(folds[0].train), data.subset(folds[0].validation), tc);
  out.model = r.model;
  out.history = r.history;
  out.selection["chosen"] = grid[chosen];
  out.selection["best_epoch"] = r.best_epoch;
  out.selection["best_val_auroc"] = r.best_val_auroc ? nlohmann::json(*r.best_val_auroc) : nlohmann::json(nullptr);
  out.selection["early_stopped"] = r.early_stopped;
  out.selection["diverged"] = r.diverged;
  return out;
}

inline nlohmann::json split_descriptor(const PreparedData& d, const RunConfig& cfg) {
  return {{"kind", "temporal"},
          {"cutoff", d.cutoff.iso()},
          {"rule", "enrollment_date < cutoff -> train"},
          {"target", target_name(cfg.target)},
          {"n_train", d.train_raw.size()},
          {"n_train_with_augmented", d.train.dense.size()},
          {"n_test", d.test.dense.size()},
          {"dropped_test_clones", d.dropped_test_clones}};
}

inline nlohmann::json logistic_pipeline_to_json(const LogisticPipelineModel& m) {
  return {{"scaler", m.scaler.to_json()}, {"selected", m.selected}, {"model", m.model.to_json()}, {"selection", m.selection}};
}

inline LogisticPipelineModel logistic_pipeline_from_json(const nlohmann::json& j) {
  LogisticPipelineModel m;
  m.scaler = FeatureScaler::from_json(j.at("scaler"));
  m.selected = j.at("selected").get<std::vector<std::string>>();
  m.model = LogisticModel::from_json(j.at("model"));
  m.selection = j.value("selection", nlohmann::json::object());
  return m;
}

// A fitted pipeline: every train-derived statistic plus the chosen model.
struct TrainedPipeline {
  RunConfig config;
  FittedStatistics stats;
  std::optional<LogisticPipelineModel> logistic;
  std::optional<TransformerPipelineModel> transformer;
  nlohmann::json details = nlohmann::json::object();
};

inline TrainedPipeline train_pipeline(const PreparedData& d, const RunConfig& cfg) {
  const auto y_train = labels_of(d.train.dense, cfg.target);
  require_both_classes(y_train, "training split");
  TrainedPipeline t;
  t.config = cfg;
  t.stats = d.stats;
  t.details = {{"model", model_kind_name(cfg.model)},
               {"funnel", d.funnel.to_json()},
               {"impute_train", d.train.summary.to_json()},
               {"impute_test", d.test.summary.to_json()}};
  if (cfg.model == ModelKind::logistic) {
    auto lp = fit_logistic_pipeline(logistic_features(d.train.dense, d.static_train, cfg), d.train.dense, y_train, cfg);
    t.stats.feature_scaler = lp.scaler;
    t.stats.selected_features = lp.selected;
    t.details["selection"] = lp.selection;
    t.logistic = std::move(lp);
  } else {
    const TensorSet ttrain = make_tensors(d.train.dense, d.stats.channel_scalers, d.static_train, cfg.target);
    auto tp = fit_transformer_pipeline(ttrain, d.train.dense, cfg);
    t.details["selection"] = tp.selection;
    t.details["history"] = history_to_json(tp.history);
    t.transformer = std::move(tp);
  }
  return t;
}

inline std::vector<double> score_test(const PreparedData& d, const TrainedPipeline& t) {
  if (t.logistic) return predict_logistic_pipeline(*t.logistic, logistic_features(d.test.dense, d.static_test, t.config));
  if (!t.transformer) throw Error("score_test: pipeline has no model");
  return predict(t.transformer->model,
                 make_tensors(d.test.dense, t.stats.channel_scalers, d.static_test, std::nullopt));
}

inline EvalReport evaluate_pipeline(const PreparedData& d, const TrainedPipeline& t, std::vector<double>* scores = nullptr) {
  const auto y_test = labels_of(d.test.dense, t.config.target);
  require_both_classes(y_test, "test split");
  const auto s = score_test(d, t);
  EvalReport r = make_report(s, y_test);
  r.split_descriptor = split_descriptor(d, t.config);
  r.config_fingerprint = fingerprint(t.config);
  r.details = t.details;
  r.details["test_ids"] = nlohmann::json::array();
  for (const auto& p : d.test.dense.patients) r.details["test_ids"].push_back(p.patient_id);
  r.details["test_scores"] = s;
  if (scores) *scores = s;
  return r;
}

inline constexpr int kPipelineCheckpointVersion = 1;

inline nlohmann::json pipeline_checkpoint_to_json(const TrainedPipeline& t) {
  nlohmann::json j{{"format", "gpfusion-pipeline-checkpoint"},
                   {"version", kPipelineCheckpointVersion},
                   {"config_fingerprint", fingerprint(t.config)},
                   {"config", t.config.to_json()},
                   {"statistics", t.stats.to_json()},
                   {"details", t.details}};
  if (t.logistic) j["logistic"] = logistic_pipeline_to_json(*t.logistic);
  if (t.transformer) j["transformer"] = checkpoint_to_json(t.transformer->model, t.transformer->history);
  return j;
}

inline TrainedPipeline pipeline_checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "gpfusion-pipeline-checkpoint")
    throw SchemaError("not a pipeline checkpoint");
  if (j.value("version", 0) != kPipelineCheckpointVersion) throw SchemaError("unsupported pipeline checkpoint version");
  TrainedPipeline t;
  t.config = RunConfig::from_json(j.at("config"));
  t.stats = FittedStatistics::from_json(j.at("statistics"));
  t.details = j.value("details", nlohmann::json::object());
  if (j.contains("logistic")) t.logistic = logistic_pipeline_from_json(j.at("logistic"));
  if (j.contains("transformer")) {
    TransformerPipelineModel tp;
    tp.model = checkpoint_from_json(j.at("transformer"), &tp.history);
    t.transformer = std::move(tp);
  }
  if (!t.logistic && !t.transformer) throw SchemaError("pipeline checkpoint holds no model");
  return t;
}

struct ExperimentResult {
  EvalReport report;
  TrainedPipeline trained;
  std::vector<double> test_scores;
};

// filter -> split -> encode -> GP impute -> features / tensors -> model
// selection on train -> final fit -> test AUROC.
inline ExperimentResult run_experiment(const Cohort& cohort, const RunConfig& cfg) {
  const PreparedData d = prepare_data(cohort, cfg);
  require_both_classes(labels_of(d.test.dense, cfg.target), "test split");
  ExperimentResult res;
  res.trained = train_pipeline(d, cfg);
  res.report = evaluate_pipeline(d, res.trained, &res.test_scores);
  return res;
}

}  // namespace gpfusion
