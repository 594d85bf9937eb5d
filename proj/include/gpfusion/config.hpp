#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cohort.hpp"
#include "core.hpp"
#include "encoder.hpp"
#include "features.hpp"
#include "gp.hpp"
#include "logistic.hpp"
#include "synth.hpp"
#include "transformer.hpp"

namespace gpfusion {

enum class ModelKind { multimodal, unimodal_ts, logistic };

inline std::string_view model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::multimodal: return "multimodal";
    case ModelKind::unimodal_ts: return "unimodal_ts";
    case ModelKind::logistic: return "logistic";
  }
  return "logistic";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "multimodal") return ModelKind::multimodal;
  if (s == "unimodal_ts" || s == "unimodal-ts") return ModelKind::unimodal_ts;
  if (s == "logistic") return ModelKind::logistic;
  throw ConfigError("unknown model '" + std::string(s) + "' (expected multimodal, unimodal-ts or logistic)");
}

struct FilterOptions {
  std::vector<NumericField> required_static = {NumericField::age, NumericField::edss};
  bool require_sex = true;
  bool density_enabled = true;
  DensityRule density;
  bool require_label = true;  // for the configured target
  bool drop_invalid_samples = true;

  [[nodiscard]] FilterConfig to_filter(Target target) const {
    FilterConfig f;
    f.required_static = required_static;
    f.require_sex = require_sex;
    if (density_enabled) f.density = density; else f.density.reset();
    if (require_label) f.required_label = target;
    f.drop_invalid_samples = drop_invalid_samples;
    return f;
  }
};

struct ImputeOptions {
  int restarts = 5;
  GpOptimizerOptions optimizer;
  int augment = 0;  // synthetic clones per training patient
};

struct FeatureOptions {
  WindowSpec window;
  bool include_static = true;  // logistic model: append encoded static columns
  int anova_keep = 30;
  int rfe_keep = 10;
};

struct RunConfig {
  std::uint64_t seed = 0;
  Target target = Target::w72;
  ModelKind model = ModelKind::multimodal;
  FilterOptions filter;
  double train_fraction = 0.8;           // cutoff at this quantile of enrollment dates
  std::optional<Date> cutoff;            // explicit cutoff overrides the quantile
  EncodingSpec encoder = EncodingSpec::all();
  ImputeOptions gp;
  FeatureOptions features;
  std::vector<double> l2_grid = {0.01, 0.1, 1.0, 10.0};
  LogisticOptions logistic;
  ModelConfig model_config;
  TrainConfig train;
  // Each entry overrides fields of model_config / train; more than one entry
  // triggers cross-validated selection.
  nlohmann::json transformer_grid = nlohmann::json::array();
  int cv_folds = 5;
  SimConfig sim;

  [[nodiscard]] nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

namespace config_detail {

inline nlohmann::json field_list(const std::vector<NumericField>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (auto f : v) a.push_back(field_name(f));
  return a;
}

inline std::vector<NumericField> parse_field_list(const nlohmann::json& a) {
  std::vector<NumericField> out;
  for (const auto& e : a) {
    auto f = numeric_field_from_name(e.get<std::string>());
    if (!f) throw ConfigError("unknown static field " + e.dump());
    out.push_back(*f);
  }
  return out;
}

inline nlohmann::json channel_list(const std::vector<ChannelId>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (auto c : v) a.push_back(channel_name(c));
  return a;
}

inline std::vector<ChannelId> parse_channel_list(const nlohmann::json& a) {
  std::vector<ChannelId> out;
  for (const auto& e : a) {
    auto c = channel_from_name(e.get<std::string>());
    if (!c) throw ConfigError("unknown channel " + e.dump());
    out.push_back(*c);
  }
  return out;
}

// Rejects keys absent from the defaults so typos do not pass silently.
inline void check_known_keys(const nlohmann::json& defaults, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object() || !defaults.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    auto d = defaults.find(it.key());
    if (d == defaults.end()) throw ConfigError("unknown config key '" + path + it.key() + "'");
    check_known_keys(*d, it.value(), path + it.key() + ".");
  }
}

}  // namespace config_detail

inline nlohmann::json RunConfig::to_json() const {
  using namespace config_detail;
  nlohmann::json stats = nlohmann::json::array();
  for (auto s : features.window.statistics) stats.push_back(stat_name(s));
  nlohmann::json mc = model_config.to_json();
  // Data-determined widths and the mode are set by the pipeline.
  mc.erase("channels");
  mc.erase("static_dim");
  mc.erase("mode");
  mc.erase("seed");
  nlohmann::json tc = train.to_json();
  tc.erase("seed");
  return {
      {"seed", seed},
      {"target", target_name(target)},
      {"model", model_kind_name(model)},
      {"filter",
       {{"required_static", field_list(filter.required_static)},
        {"require_sex", filter.require_sex},
        {"density",
         {{"enabled", filter.density_enabled},
          {"channels", channel_list(filter.density.channels)},
          {"min_samples", filter.density.min_samples},
          {"min_channels", filter.density.min_channels}}},
        {"require_label", filter.require_label},
        {"drop_invalid_samples", filter.drop_invalid_samples}}},
      {"split", {{"train_fraction", train_fraction}, {"cutoff", cutoff ? nlohmann::json(cutoff->iso()) : nlohmann::json(nullptr)}}},
      {"encoder", {{"numeric", field_list(encoder.numeric)}, {"include_sex", encoder.include_sex}}},
      {"gp",
       {{"restarts", gp.restarts},
        {"max_iterations", gp.optimizer.max_iterations},
        {"projected_gradient_tol", gp.optimizer.projected_gradient_tol},
        {"augment", gp.augment}}},
      {"features",
       {{"window_length", features.window.window_length},
        {"stride", features.window.stride},
        {"statistics", stats},
        {"include_static", features.include_static},
        {"anova_keep", features.anova_keep},
        {"rfe_keep", features.rfe_keep}}},
      {"logistic", {{"l2_grid", l2_grid}, {"max_iter", logistic.max_iter}, {"tol", logistic.tol}}},
      {"transformer", {{"model", mc}, {"train", tc}, {"grid", transformer_grid}}},
      {"cv_folds", cv_folds},
      {"sim", sim.to_json()},
  };
}

inline RunConfig RunConfig::from_json(const nlohmann::json& user) {
  using namespace config_detail;
  const nlohmann::json defaults = RunConfig{}.to_json();
  check_known_keys(defaults, user, "");
  nlohmann::json j = defaults;
  j.merge_patch(user);
  RunConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.target = parse_target(j.at("target").get<std::string>());
    c.model = parse_model_kind(j.at("model").get<std::string>());
    const auto& f = j.at("filter");
    c.filter.required_static = parse_field_list(f.at("required_static"));
    c.filter.require_sex = f.at("require_sex").get<bool>();
    c.filter.density_enabled = f.at("density").at("enabled").get<bool>();
    c.filter.density.channels = parse_channel_list(f.at("density").at("channels"));
    c.filter.density.min_samples = f.at("density").at("min_samples").get<int>();
    c.filter.density.min_channels = f.at("density").at("min_channels").get<int>();
    c.filter.require_label = f.at("require_label").get<bool>();
    c.filter.drop_invalid_samples = f.at("drop_invalid_samples").get<bool>();
    c.train_fraction = j.at("split").at("train_fraction").get<double>();
    // merge_patch erases null members, so an absent cutoff means "use the quantile".
    if (const auto co = j.at("split").value("cutoff", nlohmann::json()); !co.is_null()) c.cutoff = Date::parse(co.get<std::string>());
    c.encoder.numeric = parse_field_list(j.at("encoder").at("numeric"));
    c.encoder.include_sex = j.at("encoder").at("include_sex").get<bool>();
    const auto& g = j.at("gp");
    c.gp.restarts = g.at("restarts").get<int>();
    c.gp.optimizer.max_iterations = g.at("max_iterations").get<int>();
    c.gp.optimizer.projected_gradient_tol = g.at("projected_gradient_tol").get<double>();
    c.gp.augment = g.at("augment").get<int>();
    const auto& fe = j.at("features");
    c.features.window.window_length = fe.at("window_length").get<int>();
    c.features.window.stride = fe.at("stride").get<int>();
    c.features.window.statistics.clear();
    for (const auto& s : fe.at("statistics")) c.features.window.statistics.push_back(parse_window_stat(s.get<std::string>()));
    c.features.include_static = fe.at("include_static").get<bool>();
    c.features.anova_keep = fe.at("anova_keep").get<int>();
    c.features.rfe_keep = fe.at("rfe_keep").get<int>();
    c.l2_grid = j.at("logistic").at("l2_grid").get<std::vector<double>>();
    c.logistic.max_iter = j.at("logistic").at("max_iter").get<int>();
    c.logistic.tol = j.at("logistic").at("tol").get<double>();
    c.model_config = ModelConfig::from_json(j.at("transformer").at("model"));
    c.train = TrainConfig::from_json(j.at("transformer").at("train"));
    c.transformer_grid = j.at("transformer").at("grid");
    c.cv_folds = j.at("cv_folds").get<int>();
    c.sim = SimConfig::from_json(j.at("sim"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) throw ConfigError("split.train_fraction must lie in (0,1)");
  if (c.gp.restarts < 1) throw ConfigError("gp.restarts must be >= 1");
  if (c.gp.augment < 0) throw ConfigError("gp.augment must be >= 0");
  if (c.features.anova_keep < 1 || c.features.rfe_keep < 1) throw ConfigError("features: keep counts must be >= 1");
  if (c.l2_grid.empty()) throw ConfigError("logistic.l2_grid must not be empty");
  if (c.cv_folds < 2) throw ConfigError("cv_folds must be >= 2");
  if (!c.transformer_grid.is_array()) throw ConfigError("transformer.grid must be an array");
  c.features.window.validate();
  return c;
}

// FNV-1a 64 over the canonical (key-sorted) JSON form, as 16 hex digits.
inline std::string fingerprint(const nlohmann::json& j) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

inline std::string fingerprint(const RunConfig& c) { return fingerprint(c.to_json()); }

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("'" + path.string() + "': " + e.what());
  }
}

inline void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

}  // namespace gpfusion
