#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gpfusion/cohort.hpp"
#include "gpfusion/config.hpp"
#include "gpfusion/core.hpp"
#include "gpfusion/pipeline.hpp"
#include "gpfusion/synth.hpp"

namespace fs = std::filesystem;
using namespace gpfusion;
using json = nlohmann::json;

namespace {

struct GlobalFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "gpfusion_out";
  std::string log_level = "info";
};

// Flags shared by the pipeline subcommands; unset values leave the config alone.
struct PipelineFlags {
  std::string cohort;
  std::optional<std::string> model;
  std::optional<std::string> target;
  std::optional<int> augment;
  std::optional<int> restarts;
};

struct SimFlags {
  std::optional<int> n;
  std::optional<std::string> signal;
  std::optional<double> signal_split;
  std::optional<double> missingness;
  std::string format = "csv";
};

RunConfig resolve_config(const GlobalFlags& g, const json& overrides) {
  json user = json::object();
  if (!g.config_path.empty()) user = read_json_file(g.config_path);
  user.merge_patch(overrides);
  if (g.seed) {
    user["seed"] = *g.seed;
    user["sim"]["seed"] = *g.seed;
  }
  return RunConfig::from_json(user);
}

json pipeline_overrides(const PipelineFlags& f) {
  json o = json::object();
  if (f.model) o["model"] = std::string(model_kind_name(parse_model_kind(*f.model)));
  if (f.target) o["target"] = *f.target;
  if (f.augment) o["gp"]["augment"] = *f.augment;
  if (f.restarts) o["gp"]["restarts"] = *f.restarts;
  return o;
}

void echo_config(const RunConfig& cfg, const fs::path& out) {
  json j = cfg.to_json();
  write_json_file({{"config_fingerprint", fingerprint(cfg)}, {"config", j}}, out / "resolved_config.json");
}

Cohort load_input_cohort(const std::string& path) {
  if (path.empty()) throw ConfigError("--cohort is required");
  if (!fs::exists(path)) throw Error("cohort path '" + path + "' does not exist");
  return load_cohort(path);
}

int cmd_simulate(const GlobalFlags& g, const SimFlags& f) {
  json o = json::object();
  if (f.n) o["sim"]["n_patients"] = *f.n;
  if (f.signal) o["sim"]["signal_strength"] = std::string(signal_name(parse_signal(*f.signal)));
  if (f.signal_split) o["sim"]["signal_split"] = *f.signal_split;
  if (f.missingness) o["sim"]["missingness"] = *f.missingness;
  const RunConfig cfg = resolve_config(g, o);
  const fs::path out = g.out;
  const Cohort c = generate(cfg.sim);
  if (f.format == "json") save_cohort(c, out / "cohort.json", CohortFormat::json);
  else save_cohort(c, out / "cohort", CohortFormat::csv_pair);
  json manifest = sim_manifest(c, cfg.sim);
  manifest["config_fingerprint"] = fingerprint(cfg);
  write_json_file(manifest, out / "manifest.json");
  echo_config(cfg, out);
  log_info("simulated " + std::to_string(c.size()) + " patients into " + out.string());
  std::cout << manifest["realized"].dump(2) << '\n';
  return 0;
}

int cmd_impute(const GlobalFlags& g, const PipelineFlags& f) {
  const RunConfig cfg = resolve_config(g, pipeline_overrides(f));
  const Cohort c = load_input_cohort(f.cohort);
  const fs::path out = g.out;
  // Scalers come from the temporal training side; every patient is completed.
  const Cohort originals = without_clones(c);
  const Date cutoff = cfg.cutoff ? *cfg.cutoff : quantile_cutoff(originals, cfg.train_fraction);
  const auto split = temporal_split(originals, cutoff);
  const ChannelScalers scalers = fit_channel_scalers(split.train);
  std::set<std::string> ids;
  for (const auto& p : originals.patients) ids.insert(p.patient_id);
  const ImputedCohort imp = impute_cohort(c, scalers, cfg.gp, cfg.seed, cfg.gp.augment > 0 ? ids : std::set<std::string>{});
  save_cohort(imp.dense, out / "imputed", CohortFormat::csv_pair);
  {
    std::ofstream models(out / "gp_models.jsonl");
    for (const auto& m : imp.models) models << m.to_json().dump() << '\n';
  }
  json summary = imp.summary.to_json();
  summary["input_patients"] = c.size();
  summary["output_patients"] = imp.dense.size();
  summary["cutoff"] = cutoff.iso();
  summary["channel_scalers"] = scalers_to_json(scalers);
  summary["config_fingerprint"] = fingerprint(cfg);
  write_json_file(summary, out / "impute_summary.json");
  echo_config(cfg, out);
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_features(const GlobalFlags& g, const PipelineFlags& f) {
  const RunConfig cfg = resolve_config(g, pipeline_overrides(f));
  const Cohort c = load_input_cohort(f.cohort);
  const fs::path out = g.out;
  const PreparedData d = prepare_data(c, cfg);
  const FeatureTable train = logistic_features(d.train.dense, d.static_train, cfg);
  const FeatureTable test = logistic_features(d.test.dense, d.static_test, cfg);
  const auto y = labels_of(d.train.dense, cfg.target);
  // Selection on training rows only (scaled, ANOVA top-k, then RFE).
  const FeatureScaler scaler = FeatureScaler::fit(train);
  const FeatureTable z = scaler.apply(train);
  const auto fstat = anova_f(z, y);
  const auto top = top_k_by_f(fstat, std::min<std::size_t>(static_cast<std::size_t>(cfg.features.anova_keep), fstat.size()));
  const FeatureTable zt = z.select_columns(top);
  const auto r = rfe(zt, y, std::min<std::size_t>(static_cast<std::size_t>(cfg.features.rfe_keep), top.size()), cfg.logistic);
  std::vector<std::string> selected;
  for (auto i : r.selected) selected.push_back(zt.column_names[i]);
  save_feature_table_csv(train, out / "features_train.csv");
  save_feature_table_csv(test, out / "features_test.csv");
  json anova = json::object();
  for (std::size_t j = 0; j < fstat.size(); ++j)
    anova[z.column_names[j]] = std::isinf(fstat[j]) ? json("inf") : json(fstat[j]);
  write_json_file({{"selected", selected}, {"anova_f", anova}, {"config_fingerprint", fingerprint(cfg)}},
                  out / "selection.json");
  write_json_file({{"split", split_descriptor(d, cfg)}, {"funnel", d.funnel.to_json()},
                   {"config_fingerprint", fingerprint(cfg)}},
                  out / "features_meta.json");
  echo_config(cfg, out);
  std::cout << json(selected).dump() << '\n';
  return 0;
}

int cmd_train(const GlobalFlags& g, const PipelineFlags& f) {
  const RunConfig cfg = resolve_config(g, pipeline_overrides(f));
  const Cohort c = load_input_cohort(f.cohort);
  const fs::path out = g.out;
  const PreparedData d = prepare_data(c, cfg);
  const TrainedPipeline t = train_pipeline(d, cfg);
  write_json_file(pipeline_checkpoint_to_json(t), out / "checkpoint.json");
  const EvalReport r = evaluate_pipeline(d, t);
  write_json_file(r.to_json(), out / "report.json");
  echo_config(cfg, out);
  std::cout << "model " << model_kind_name(cfg.model) << " target " << target_name(cfg.target) << " test AUROC "
            << format_double(r.auroc) << " (n_pos " << r.n_pos << ", n_neg " << r.n_neg << ") fingerprint "
            << r.config_fingerprint << '\n';
  return 0;
}

int cmd_evaluate(const GlobalFlags& g, const PipelineFlags& f, const std::string& checkpoint) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(checkpoint)) throw Error("checkpoint '" + checkpoint + "' does not exist");
  const TrainedPipeline t = pipeline_checkpoint_from_json(read_json_file(checkpoint));
  const Cohort c = load_input_cohort(f.cohort);
  const fs::path out = g.out;
  const PreparedData d = prepare_data(c, t.config);
  if (!(d.stats.channel_scalers == t.stats.channel_scalers) || !(d.stats.encoder == t.stats.encoder))
    throw Error("cohort does not match the checkpoint's training data (fitted statistics differ)");
  const EvalReport r = evaluate_pipeline(d, t);
  write_json_file(r.to_json(), out / "report.json");
  {
    std::ofstream roc(out / "roc.csv");
    roc << "fpr,tpr\n";
    for (const auto& p : r.roc_points) roc << format_double(p.fpr) << ',' << format_double(p.tpr) << '\n';
  }
  std::cout << "test AUROC " << format_double(r.auroc) << " (n_pos " << r.n_pos << ", n_neg " << r.n_neg
            << ") fingerprint " << r.config_fingerprint << '\n';
  return 0;
}

int cmd_report(const GlobalFlags& g, const std::vector<std::string>& inputs) {
  if (inputs.empty()) throw ConfigError("report needs at least one report.json");
  const fs::path out = g.out;
  std::string md = "| report | model | target | AUROC | n_pos | n_neg | n_train | fingerprint |\n"
                   "|---|---|---|---|---|---|---|---|\n";
  json rows = json::array();
  for (const auto& path : inputs) {
    const EvalReport r = EvalReport::from_json(read_json_file(path));
    const std::string model = r.details.value("model", std::string("?"));
    const std::string target = r.split_descriptor.value("target", std::string("?"));
    const auto n_train = r.split_descriptor.value("n_train", 0);
    md += "| " + path + " | " + model + " | " + target + " | " + format_double(std::round(r.auroc * 1e4) / 1e4) +
          " | " + std::to_string(r.n_pos) + " | " + std::to_string(r.n_neg) + " | " + std::to_string(n_train) +
          " | " + r.config_fingerprint + " |\n";
    rows.push_back({{"report", path}, {"model", model}, {"target", target}, {"auroc", r.auroc},
                    {"n_pos", r.n_pos}, {"n_neg", r.n_neg}, {"config_fingerprint", r.config_fingerprint}});
  }
  md += "\nNot implemented: XGBoost, Random Forest, AutoGluon, TabPFN, MOMENT, sktime classifiers.\n";
  fs::create_directories(out);
  std::ofstream(out / "report.md") << md;
  write_json_file({{"reports", rows}}, out / "summary.json");
  std::cout << md;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GP imputation and multimodal transformer pipeline for progression prediction"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags g;
  app.add_option("--config", g.config_path, "JSON config file (defaults < file < flags)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--log-level", g.log_level, "error, warn, info or debug")
      ->check(CLI::IsMember({"error", "warn", "info", "debug"}));

  SimFlags sim;
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic cohort");
  simulate->add_option("--n", sim.n, "Number of patients")->check(CLI::Range(10, 1000000));
  simulate->add_option("--signal", sim.signal, "none, weak or strong")->check(CLI::IsMember({"none", "weak", "strong"}));
  simulate->add_option("--signal-split", sim.signal_split, "Share of signal in static features")->check(CLI::Range(0.0, 1.0));
  simulate->add_option("--missingness", sim.missingness, "Per-day observation probability")->check(CLI::Range(0.0, 1.0));
  simulate->add_option("--format", sim.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  PipelineFlags pf;
  std::string checkpoint;
  std::vector<std::string> report_inputs;
  auto add_pipeline_flags = [&](CLI::App* sub, bool with_model) {
    sub->add_option("--cohort", pf.cohort, "Cohort directory (CSV pair) or .json file")->required();
    sub->add_option("--target", pf.target, "w48 or w72")->check(CLI::IsMember({"w48", "w72"}));
    sub->add_option("--restarts", pf.restarts, "GP optimizer restarts")->check(CLI::PositiveNumber);
    if (with_model)
      sub->add_option("--model", pf.model, "multimodal, unimodal-ts or logistic")
          ->check(CLI::IsMember({"multimodal", "unimodal-ts", "unimodal_ts", "logistic"}));
  };
  auto* impute = app.add_subcommand("impute", "Fit per-patient GPs and complete trajectories");
  add_pipeline_flags(impute, false);
  impute->add_option("--augment", pf.augment, "Synthetic clones per patient")->check(CLI::NonNegativeNumber);
  auto* features = app.add_subcommand("features", "Windowed features and ANOVA/RFE selection");
  add_pipeline_flags(features, false);
  auto* train = app.add_subcommand("train", "Fit a model and report test AUROC");
  add_pipeline_flags(train, true);
  train->add_option("--augment", pf.augment, "Synthetic clones per training patient")->check(CLI::NonNegativeNumber);
  auto* evaluate = app.add_subcommand("evaluate", "Score a saved checkpoint on the test split");
  add_pipeline_flags(evaluate, false);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint.json written by train")->required();
  auto* report = app.add_subcommand("report", "Summarize report.json files");
  report->add_option("reports", report_inputs, "report.json files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    log_threshold() = parse_log_level(g.log_level);
    if (*simulate) return cmd_simulate(g, sim);
    if (*impute) return cmd_impute(g, pf);
    if (*features) return cmd_features(g, pf);
    if (*train) return cmd_train(g, pf);
    if (*evaluate) return cmd_evaluate(g, pf, checkpoint);
    if (*report) return cmd_report(g, report_inputs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
