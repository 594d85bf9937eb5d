#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core.hpp"

namespace gpfusion {

inline constexpr int kFirstDay = 0;
inline constexpr int kLastDay = 84;
inline constexpr int kWindowDays = kLastDay - kFirstDay + 1;  // 85

// ---------------------------------------------------------------------------
// Static (baseline clinical) features
// ---------------------------------------------------------------------------

enum class NumericField : int {
  age,
  bmi,
  edss,
  fs_pyramidal,
  fs_cerebellar,
  fs_brainstem,
  fs_sensory,
  fs_bowel_bladder,
  fs_visual,
  fs_cerebral,
  fs_ambulation,
  t25fwt,
  nhpt_avg,
  nhpt_min,
  nhpt_max,
  nhpt_range,
  sdmt,
  num_relapses,
  onset_years,
  vol_cerebellar_wm,
  vol_cerebral_wm,
  vol_t2_lesion,
  vol_thalamic,
};

inline constexpr std::size_t kNumericFieldCount = 23;

// Column names used in patients.csv and in encoded feature tables.
inline constexpr std::array<std::string_view, kNumericFieldCount> kNumericFieldNames = {
    "AGE",           "BBMI",         "EDSS",          "FS_PYRAMIDAL",
    "FS_CEREBELLAR", "FS_BRAINSTEM", "FS_SENSORY",    "FS_BOWEL_BLADDER",
    "FS_VISUAL",     "FS_CEREBRAL",  "FS_AMBULATION", "T25FWT",
    "NHPT_AVG",      "NHPT_MIN",     "NHPT_MAX",      "NHPT_RANGE",
    "BLSDMT",        "NUMRLP",       "ONSETYRS",      "VOL_CEREBELLAR_WM",
    "VOL_CEREBRAL_WM", "VOL_T2_LESION", "VOL_THALAMIC"};

inline constexpr std::string_view kSexColumn = "SEX";

inline std::string_view field_name(NumericField f) {
  return kNumericFieldNames[static_cast<std::size_t>(f)];
}

inline std::optional<NumericField> numeric_field_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumericFieldCount; ++i)
    if (kNumericFieldNames[i] == name) return static_cast<NumericField>(i);
  return std::nullopt;
}

inline bool is_functional_score(NumericField f) {
  return f >= NumericField::fs_pyramidal && f <= NumericField::fs_ambulation;
}

struct StaticFeatures {
  std::array<std::optional<double>, kNumericFieldCount> numeric{};
  std::optional<std::string> sex;  // "F" / "M"; other values survive loading

  std::optional<double>& operator[](NumericField f) {
    return numeric[static_cast<std::size_t>(f)];
  }
  const std::optional<double>& operator[](NumericField f) const {
    return numeric[static_cast<std::size_t>(f)];
  }

  friend bool operator==(const StaticFeatures&, const StaticFeatures&) = default;
};

// ---------------------------------------------------------------------------
// Digital (Floodlight) channels
// ---------------------------------------------------------------------------

enum class ChannelId : int {
  step_duration_med,
  step_impulse_med,
  step_length_med,
  step_length_sum,
  step_velocity_med,
  turn_speed_med,
  das_fig8_accuracy,
  pinch_async,
  pinch_count,
};

inline constexpr std::size_t kChannelCount = 9;

inline constexpr std::array<std::string_view, kChannelCount> kChannelNames = {
    "step_duration_med", "step_impulse_med",  "step_length_med",
    "step_length_sum",   "step_velocity_med", "turn_speed_med",
    "das_fig8_accuracy", "pinch_async",       "pinch_count"};

inline std::string_view channel_name(ChannelId c) {
  return kChannelNames[static_cast<std::size_t>(c)];
}

inline std::optional<ChannelId> channel_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kChannelCount; ++i)
    if (kChannelNames[i] == name) return static_cast<ChannelId>(i);
  return std::nullopt;
}

inline bool is_gait_channel(ChannelId c) { return c <= ChannelId::turn_speed_med; }

inline std::vector<ChannelId> all_channels() {
  std::vector<ChannelId> out;
  for (std::size_t i = 0; i < kChannelCount; ++i) out.push_back(static_cast<ChannelId>(i));
  return out;
}

inline std::vector<ChannelId> gait_channels() {
  std::vector<ChannelId> out;
  for (auto c : all_channels())
    if (is_gait_channel(c)) out.push_back(c);
  return out;
}

struct Sample {
  int day = 0;
  double value = 0.0;
  friend bool operator==(const Sample&, const Sample&) = default;
};

struct DigitalChannel {
  ChannelId id = ChannelId::step_duration_med;
  std::vector<Sample> samples;  // strictly increasing days within [0, 84]

  [[nodiscard]] std::vector<double> times() const {
    std::vector<double> t;
    t.reserve(samples.size());
    for (const auto& s : samples) t.push_back(static_cast<double>(s.day));
    return t;
  }
  [[nodiscard]] std::vector<double> values() const {
    std::vector<double> v;
    v.reserve(samples.size());
    for (const auto& s : samples) v.push_back(s.value);
    return v;
  }

  friend bool operator==(const DigitalChannel&, const DigitalChannel&) = default;
};

enum class Target { w48, w72 };

inline std::string_view target_name(Target t) { return t == Target::w48 ? "w48" : "w72"; }

inline Target parse_target(std::string_view s) {
  if (s == "w48") return Target::w48;
  if (s == "w72") return Target::w72;
  throw ConfigError("unknown target '" + std::string(s) + "' (expected w48 or w72)");
}

struct PatientRecord {
  std::string patient_id;
  Date enrollment_date;
  StaticFeatures static_features;
  std::vector<DigitalChannel> channels;  // unique ids, sorted by id
  std::optional<bool> label_w48;
  std::optional<bool> label_w72;

  [[nodiscard]] const DigitalChannel* channel(ChannelId id) const {
    for (const auto& c : channels)
      if (c.id == id) return &c;
    return nullptr;
  }
  DigitalChannel* channel(ChannelId id) {
    for (auto& c : channels)
      if (c.id == id) return &c;
    return nullptr;
  }
  [[nodiscard]] std::optional<bool> label(Target t) const {
    return t == Target::w48 ? label_w48 : label_w72;
  }

  friend bool operator==(const PatientRecord&, const PatientRecord&) = default;
};

struct Cohort {
  std::vector<PatientRecord> patients;
  std::string provenance;

  [[nodiscard]] std::size_t size() const { return patients.size(); }

  friend bool operator==(const Cohort&, const Cohort&) = default;
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

// Returns a list of invariant violations; empty when the record is valid.
inline std::vector<std::string> validate_record(const PatientRecord& p) {
  std::vector<std::string> errs;
  const auto& s = p.static_features;
  auto where = [&](std::string_view what) {
    return "patient '" + p.patient_id + "': " + std::string(what);
  };
  if (auto e = s[NumericField::edss]) {
    const double twice = *e * 2.0;
    if (*e < 0.0 || *e > 10.0 || twice != std::floor(twice))
      errs.push_back(where("EDSS must be a multiple of 0.5 within [0,10]"));
  }
  for (std::size_t i = 0; i < kNumericFieldCount; ++i) {
    const auto f = static_cast<NumericField>(i);
    const auto& v = s.numeric[i];
    if (!v) continue;
    if (!std::isfinite(*v)) {
      errs.push_back(where(std::string(field_name(f)) + " is not finite"));
      continue;
    }
    if (*v < 0.0 && f != NumericField::bmi)
      errs.push_back(where(std::string(field_name(f)) + " must be >= 0"));
    if (is_functional_score(f) && *v != std::floor(*v))
      errs.push_back(where(std::string(field_name(f)) + " must be an integer score"));
  }
  if (auto lo = s[NumericField::nhpt_min], hi = s[NumericField::nhpt_max],
      rg = s[NumericField::nhpt_range];
      lo && hi && rg && std::abs((*hi - *lo) - *rg) > 1e-9 * std::max(1.0, std::abs(*rg)))
    errs.push_back(where("NHPT_RANGE must equal NHPT_MAX - NHPT_MIN"));

  std::set<ChannelId> seen;
  for (const auto& c : p.channels) {
    if (!seen.insert(c.id).second)
      errs.push_back(where("duplicate channel " + std::string(channel_name(c.id))));
    int prev = -1;
    for (const auto& smp : c.samples) {
      if (smp.day < kFirstDay || smp.day > kLastDay)
        errs.push_back(where("channel " + std::string(channel_name(c.id)) + " day " +
                             std::to_string(smp.day) + " outside [0,84]"));
      if (smp.day <= prev)
        errs.push_back(where("channel " + std::string(channel_name(c.id)) +
                             " days not strictly increasing"));
      prev = smp.day;
    }
  }
  return errs;
}

inline void validate_cohort(const Cohort& c) {
  std::set<std::string> ids;
  std::vector<std::string> errs;
  for (const auto& p : c.patients) {
    if (!ids.insert(p.patient_id).second)
      errs.push_back("duplicate patient_id '" + p.patient_id + "'");
    auto e = validate_record(p);
    errs.insert(errs.end(), e.begin(), e.end());
  }
  if (!errs.empty()) {
    std::string msg = "cohort failed validation:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw SchemaError(msg);
  }
}

// ---------------------------------------------------------------------------
// On-disk formats
//
//   patients.csv: patient_id,enrollment_date,<static columns>,SEX,label_w48,label_w72
//   samples.csv:  patient_id,channel_id,day,value
//   cohort.json:  {"provenance": ..., "patients": [{..., "channels": {id: [[day, value], ...]}}]}
//
// Empty cells (or JSON null) denote missing values. Labels are 0/1.
// ---------------------------------------------------------------------------

enum class CohortFormat { csv_pair, json };

namespace detail {

inline std::vector<std::string> patients_header() {
  std::vector<std::string> h = {"patient_id", "enrollment_date"};
  for (auto n : kNumericFieldNames) h.emplace_back(n);
  h.emplace_back(kSexColumn);
  h.emplace_back("label_w48");
  h.emplace_back("label_w72");
  return h;
}

inline std::optional<bool> parse_label(std::string_view s, bool& ok) {
  ok = true;
  if (s.empty()) return std::nullopt;
  if (s == "1" || s == "true" || s == "True") return true;
  if (s == "0" || s == "false" || s == "False") return false;
  ok = false;
  return std::nullopt;
}

inline std::string label_cell(const std::optional<bool>& v) {
  if (!v) return "";
  return *v ? "1" : "0";
}

inline void sort_channels(PatientRecord& p) {
  std::sort(p.channels.begin(), p.channels.end(),
            [](const DigitalChannel& a, const DigitalChannel& b) { return a.id < b.id; });
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  return out;
}

}  // namespace detail

// Reads patients.csv + samples.csv from `dir`. All malformed rows are collected
// and reported together in one ParseError.
inline Cohort load_cohort_csv(const std::filesystem::path& dir) {
  Cohort cohort;
  cohort.provenance = "csv:" + dir.string();
  std::vector<std::string> errors;
  std::map<std::string, std::size_t> index;

  {
    const auto path = dir / "patients.csv";
    auto in = detail::open_input(path);
    std::string line;
    if (!std::getline(in, line)) return cohort;  // empty file -> empty cohort
    const auto header = split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const char* required : {"patient_id", "enrollment_date"})
      if (!col.count(required))
        throw ParseError(path.string() + ": missing column '" + required + "'");

    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      if (line.empty() || line == "\r") continue;
      const auto cells = split_csv_line(line);
      const std::string at = path.filename().string() + " row " + std::to_string(row);
      if (cells.size() != header.size()) {
        errors.push_back(at + ": expected " + std::to_string(header.size()) + " cells, got " +
                         std::to_string(cells.size()));
        continue;
      }
      auto cell = [&](std::string_view name) -> const std::string* {
        auto it = col.find(std::string(name));
        return it == col.end() ? nullptr : &cells[it->second];
      };
      PatientRecord p;
      p.patient_id = *cell("patient_id");
      if (p.patient_id.empty()) errors.push_back(at + ", column patient_id: empty id");
      if (auto d = Date::parse(*cell("enrollment_date"))) p.enrollment_date = *d;
      else errors.push_back(at + ", column enrollment_date: invalid ISO date '" +
                            *cell("enrollment_date") + "'");
      for (std::size_t i = 0; i < kNumericFieldCount; ++i) {
        const auto* c = cell(kNumericFieldNames[i]);
        if (!c || c->empty()) continue;
        if (auto v = parse_double(*c)) p.static_features.numeric[i] = *v;
        else errors.push_back(at + ", column " + std::string(kNumericFieldNames[i]) +
                              ": not a number '" + *c + "'");
      }
      if (const auto* c = cell(kSexColumn); c && !c->empty()) p.static_features.sex = *c;
      for (auto [name, dst] : {std::pair{"label_w48", &p.label_w48},
                               std::pair{"label_w72", &p.label_w72}}) {
        const auto* c = cell(name);
        if (!c) continue;
        bool ok = true;
        *dst = detail::parse_label(*c, ok);
        if (!ok) errors.push_back(at + ", column " + name + ": invalid label '" + *c + "'");
      }
      if (index.count(p.patient_id)) {
        throw SchemaError(at + ": duplicate patient_id '" + p.patient_id + "'");
      }
      index[p.patient_id] = cohort.patients.size();
      cohort.patients.push_back(std::move(p));
    }
  }

  {
    const auto path = dir / "samples.csv";
    auto in = detail::open_input(path);
    std::string line;
    if (std::getline(in, line)) {
      const auto header = split_csv_line(line);
      const std::vector<std::string> expected = {"patient_id", "channel_id", "day", "value"};
      if (header != expected)
        throw ParseError(path.string() + ": header must be patient_id,channel_id,day,value");
      std::size_t row = 1;
      while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv_line(line);
        const std::string at = path.filename().string() + " row " + std::to_string(row);
        if (cells.size() != 4) {
          errors.push_back(at + ": expected 4 cells");
          continue;
        }
        auto it = index.find(cells[0]);
        if (it == index.end()) {
          errors.push_back(at + ", column patient_id: unknown patient '" + cells[0] + "'");
          continue;
        }
        auto ch = channel_from_name(cells[1]);
        if (!ch) {
          errors.push_back(at + ", column channel_id: unknown channel '" + cells[1] + "'");
          continue;
        }
        auto day = parse_int(cells[2]);
        if (!day || *day < kFirstDay || *day > kLastDay) {
          errors.push_back(at + ", column day: '" + cells[2] + "' not an integer in [0,84]");
          continue;
        }
        auto value = parse_double(cells[3]);
        if (!value) {
          errors.push_back(at + ", column value: not a number '" + cells[3] + "'");
          continue;
        }
        auto& p = cohort.patients[it->second];
        DigitalChannel* c = p.channel(*ch);
        if (!c) {
          p.channels.push_back(DigitalChannel{*ch, {}});
          c = &p.channels.back();
        }
        if (!c->samples.empty() && c->samples.back().day >= *day) {
          errors.push_back(at + ", column day: days must be strictly increasing per channel");
          continue;
        }
        c->samples.push_back(Sample{static_cast<int>(*day), *value});
      }
    }
  }

  if (!errors.empty()) {
    std::string msg = "failed to load cohort from '" + dir.string() + "':";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ParseError(msg);
  }
  for (auto& p : cohort.patients) detail::sort_channels(p);
  validate_cohort(cohort);
  return cohort;
}

inline void save_cohort_csv(const Cohort& cohort, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto out = detail::open_output(dir / "patients.csv");
    const auto header = detail::patients_header();
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << '\n';
    for (const auto& p : cohort.patients) {
      out << csv_escape(p.patient_id) << ',' << p.enrollment_date.iso();
      for (const auto& v : p.static_features.numeric) out << ',' << (v ? format_double(*v) : "");
      out << ',' << csv_escape(p.static_features.sex.value_or(""));
      out << ',' << detail::label_cell(p.label_w48) << ',' << detail::label_cell(p.label_w72)
          << '\n';
    }
  }
  {
    auto out = detail::open_output(dir / "samples.csv");
    out << "patient_id,channel_id,day,value\n";
    for (const auto& p : cohort.patients)
      for (const auto& c : p.channels)
        for (const auto& s : c.samples)
          out << csv_escape(p.patient_id) << ',' << channel_name(c.id) << ',' << s.day << ','
              << format_double(s.value) << '\n';
  }
}

inline nlohmann::json cohort_to_json(const Cohort& cohort) {
  using nlohmann::json;
  json j;
  j["provenance"] = cohort.provenance;
  j["patients"] = json::array();
  for (const auto& p : cohort.patients) {
    json jp;
    jp["patient_id"] = p.patient_id;
    jp["enrollment_date"] = p.enrollment_date.iso();
    json st = json::object();
    for (std::size_t i = 0; i < kNumericFieldCount; ++i) {
      const auto& v = p.static_features.numeric[i];
      st[std::string(kNumericFieldNames[i])] = v ? json(*v) : json(nullptr);
    }
    st[std::string(kSexColumn)] =
        p.static_features.sex ? json(*p.static_features.sex) : json(nullptr);
    jp["static"] = st;
    jp["label_w48"] = p.label_w48 ? json(*p.label_w48) : json(nullptr);
    jp["label_w72"] = p.label_w72 ? json(*p.label_w72) : json(nullptr);
    json ch = json::object();
    for (const auto& c : p.channels) {
      json arr = json::array();
      for (const auto& s : c.samples) arr.push_back(json::array({s.day, s.value}));
      ch[std::string(channel_name(c.id))] = arr;
    }
    jp["channels"] = ch;
    j["patients"].push_back(jp);
  }
  return j;
}

inline Cohort cohort_from_json(const nlohmann::json& j) {
  Cohort cohort;
  cohort.provenance = j.value("provenance", std::string("json"));
  std::vector<std::string> errors;
  std::set<std::string> ids;
  std::size_t row = 0;
  for (const auto& jp : j.at("patients")) {
    const std::string at = "patients[" + std::to_string(row++) + "]";
    try {
      PatientRecord p;
      p.patient_id = jp.at("patient_id").get<std::string>();
      auto d = Date::parse(jp.at("enrollment_date").get<std::string>());
      if (!d) {
        errors.push_back(at + ", field enrollment_date: invalid ISO date");
        continue;
      }
      p.enrollment_date = *d;
      const auto& st = jp.at("static");
      for (std::size_t i = 0; i < kNumericFieldCount; ++i) {
        auto it = st.find(std::string(kNumericFieldNames[i]));
        if (it != st.end() && !it->is_null()) p.static_features.numeric[i] = it->get<double>();
      }
      if (auto it = st.find(std::string(kSexColumn)); it != st.end() && !it->is_null())
        p.static_features.sex = it->get<std::string>();
      for (auto [name, dst] : {std::pair{"label_w48", &p.label_w48},
                               std::pair{"label_w72", &p.label_w72}}) {
        auto it = jp.find(name);
        if (it != jp.end() && !it->is_null()) *dst = it->get<bool>();
      }
      for (const auto& [name, arr] : jp.at("channels").items()) {
        auto ch = channel_from_name(name);
        if (!ch) {
          errors.push_back(at + ", channel '" + name + "': unknown channel");
          continue;
        }
        DigitalChannel c{*ch, {}};
        for (const auto& s : arr) {
          const int day = s.at(0).get<int>();
          if (day < kFirstDay || day > kLastDay) {
            errors.push_back(at + ", channel " + name + ": day " + std::to_string(day) +
                             " outside [0,84]");
            continue;
          }
          c.samples.push_back(Sample{day, s.at(1).get<double>()});
        }
        p.channels.push_back(std::move(c));
      }
      detail::sort_channels(p);
      if (!ids.insert(p.patient_id).second)
        throw SchemaError(at + ": duplicate patient_id '" + p.patient_id + "'");
      cohort.patients.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      errors.push_back(at + ": " + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "failed to load JSON cohort:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ParseError(msg);
  }
  validate_cohort(cohort);
  return cohort;
}

inline Cohort load_cohort(const std::filesystem::path& path, CohortFormat format) {
  if (format == CohortFormat::json) {
    auto in = detail::open_input(path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    return cohort_from_json(j);
  }
  return load_cohort_csv(path);
}

// Directories are read as a CSV pair, *.json files as the single-file format.
inline Cohort load_cohort(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw ParseError("cohort path '" + path.string() + "' does not exist");
  return load_cohort(path, std::filesystem::is_directory(path) ? CohortFormat::csv_pair
                                                                : CohortFormat::json);
}

inline void save_cohort(const Cohort& cohort, const std::filesystem::path& path,
                        CohortFormat format) {
  if (format == CohortFormat::csv_pair) {
    save_cohort_csv(cohort, path);
    return;
  }
  auto out = detail::open_output(path);
  out << cohort_to_json(cohort).dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Cohort filtering
// ---------------------------------------------------------------------------

// At least `min_channels` of `channels` must each carry `min_samples` valid
// samples within days 0..84.
struct DensityRule {
  std::vector<ChannelId> channels = gait_channels();
  int min_samples = 8;
  int min_channels = 1;
};

struct FilterConfig {
  std::vector<NumericField> required_static;
  bool require_sex = false;
  std::optional<DensityRule> density = DensityRule{};
  std::optional<Target> required_label;
  // Generic per-sample quality-control: drop non-finite samples.
  bool drop_invalid_samples = true;

  static FilterConfig none() {
    FilterConfig f;
    f.density.reset();
    f.drop_invalid_samples = false;
    return f;
  }
};

struct FilterReport {
  std::size_t input_count = 0;
  std::size_t retained_count = 0;
  std::size_t dropped_samples = 0;
  // Ordered funnel: each patient is charged to the first rule it fails.
  std::vector<std::pair<std::string, std::size_t>> excluded;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    nlohmann::json ex = nlohmann::json::object();
    for (const auto& [rule, n] : excluded) ex[rule] = n;
    j["input_count"] = input_count;
    j["excluded"] = ex;
    j["retained_count"] = retained_count;
    j["dropped_samples"] = dropped_samples;
    return j;
  }
};

inline std::pair<Cohort, FilterReport> filter_cohort(const Cohort& c, const FilterConfig& rules) {
  FilterReport report;
  report.input_count = c.size();
  const std::string label_rule =
      rules.required_label ? "label_" + std::string(target_name(*rules.required_label)) : "";
  report.excluded = {{"required_static", 0}, {"density", 0}};
  if (rules.required_label) report.excluded.emplace_back(label_rule, 0);

  Cohort out;
  out.provenance = c.provenance;
  for (const auto& src : c.patients) {
    PatientRecord p = src;
    if (rules.drop_invalid_samples) {
      for (auto& ch : p.channels) {
        const auto before = ch.samples.size();
        std::erase_if(ch.samples, [](const Sample& s) { return !std::isfinite(s.value); });
        report.dropped_samples += before - ch.samples.size();
      }
    }
    bool ok = true;
    for (auto f : rules.required_static) ok = ok && p.static_features[f].has_value();
    if (rules.require_sex) ok = ok && p.static_features.sex.has_value();
    if (!ok) {
      ++report.excluded[0].second;
      continue;
    }
    if (rules.density) {
      int dense = 0;
      for (auto id : rules.density->channels) {
        const auto* ch = p.channel(id);
        if (!ch) continue;
        const auto n = std::count_if(ch->samples.begin(), ch->samples.end(), [](const Sample& s) {
          return s.day >= kFirstDay && s.day <= kLastDay;
        });
        if (n >= rules.density->min_samples) ++dense;
      }
      if (dense < rules.density->min_channels) {
        ++report.excluded[1].second;
        continue;
      }
    }
    if (rules.required_label && !p.label(*rules.required_label)) {
      ++report.excluded[2].second;
      continue;
    }
    out.patients.push_back(std::move(p));
  }
  report.retained_count = out.size();
  return {std::move(out), std::move(report)};
}

// ---------------------------------------------------------------------------
// Temporal split
// ---------------------------------------------------------------------------

struct SplitResult {
  Cohort train;
  Cohort test;
  Date cutoff;
  std::vector<std::string> warnings;
};

// enrollment_date < cutoff -> train, otherwise test.
inline SplitResult temporal_split(const Cohort& c, const Date& cutoff) {
  SplitResult r;
  r.cutoff = cutoff;
  r.train.provenance = c.provenance;
  r.test.provenance = c.provenance;
  for (const auto& p : c.patients) (p.enrollment_date < cutoff ? r.train : r.test).patients.push_back(p);
  if (r.train.patients.empty() || r.test.patients.empty()) {
    r.warnings.push_back("degenerate temporal split: " + std::to_string(r.train.size()) +
                         " train / " + std::to_string(r.test.size()) + " test");
    log_warn(r.warnings.back());
  }
  return r;
}

// The enrollment date at the given quantile of the sorted dates. Splitting at
// the 0.8 quantile puts roughly 80% of patients in train.
inline Date quantile_cutoff(const Cohort& c, double fraction) {
  if (c.patients.empty()) throw Error("quantile_cutoff: empty cohort");
  std::vector<long> days;
  for (const auto& p : c.patients) days.push_back(p.enrollment_date.days_since_epoch());
  std::sort(days.begin(), days.end());
  auto idx = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(days.size())));
  idx = std::min(idx, days.size() - 1);
  return Date::from_days_since_epoch(days[idx]);
}

}  // namespace gpfusion
