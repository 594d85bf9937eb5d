#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "gpfusion/cohort.hpp"
#include "gpfusion/encoder.hpp"
#include "gpfusion/synth.hpp"

using namespace gpfusion;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gpfusion_cohort_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
}

std::string patients_csv_header() {
  std::string h = "patient_id,enrollment_date";
  for (auto n : kNumericFieldNames) h += "," + std::string(n);
  return h + ",SEX,label_w48,label_w72\n";
}

std::string patient_row(const std::string& id, const std::string& date, const std::string& w72 = "1") {
  std::string r = id + "," + date;
  for (std::size_t i = 0; i < kNumericFieldCount; ++i) r += ",";
  return r + ",F,0," + w72 + "\n";
}

PatientRecord simple_patient(const std::string& id, Date date, int gait_samples) {
  PatientRecord p;
  p.patient_id = id;
  p.enrollment_date = date;
  p.static_features[NumericField::age] = 40.0;
  p.static_features.sex = "M";
  p.label_w72 = true;
  DigitalChannel ch{ChannelId::step_duration_med, {}};
  for (int d = 0; d < gait_samples; ++d) ch.samples.push_back({d * 3, 1.0 + d});
  if (gait_samples > 0) p.channels.push_back(ch);
  p.channels.push_back({ChannelId::pinch_count, {{0, 10.0}, {1, 11.0}, {2, 12.0}, {3, 13.0},
                                                  {4, 14.0}, {5, 15.0}, {6, 16.0}, {7, 17.0}}});
  std::sort(p.channels.begin(), p.channels.end(), [](auto& a, auto& b) { return a.id < b.id; });
  return p;
}

SimConfig small_sim(std::uint64_t seed) {
  SimConfig s;
  s.n_patients = 40;
  s.seed = seed;
  s.signal_strength = SignalStrength::weak;
  return s;
}

}  // namespace

TEST(CohortLoad, EmptyPatientFileGivesEmptyCohort) {
  const auto dir = scratch("empty");
  write(dir / "patients.csv", "");
  write(dir / "samples.csv", "");
  EXPECT_EQ(load_cohort_csv(dir).size(), 0u);
}

TEST(CohortLoad, SamplesPreservedInOrder) {
  const auto dir = scratch("one");
  write(dir / "patients.csv", patients_csv_header() + patient_row("P1", "2020-01-05"));
  write(dir / "samples.csv",
        "patient_id,channel_id,day,value\nP1,pinch_count,0,3.5\nP1,pinch_count,4,2.25\nP1,pinch_count,80,-1\n");
  const Cohort c = load_cohort_csv(dir);
  ASSERT_EQ(c.size(), 1u);
  const auto* ch = c.patients[0].channel(ChannelId::pinch_count);
  ASSERT_NE(ch, nullptr);
  EXPECT_EQ(ch->samples, (std::vector<Sample>{{0, 3.5}, {4, 2.25}, {80, -1.0}}));
  EXPECT_EQ(c.patients[0].label_w72, true);
  EXPECT_EQ(c.patients[0].label_w48, false);
  EXPECT_EQ(c.patients[0].enrollment_date, (Date{2020, 1, 5}));
}

TEST(CohortLoad, OutOfWindowDayNamesRow) {
  const auto dir = scratch("day90");
  write(dir / "patients.csv", patients_csv_header() + patient_row("P1", "2020-01-05"));
  write(dir / "samples.csv", "patient_id,channel_id,day,value\nP1,pinch_count,3,1\nP1,pinch_count,90,1\n");
  try {
    load_cohort_csv(dir);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("samples.csv row 3, column day"), std::string::npos) << e.what();
  }
}

TEST(CohortLoad, MalformedCellsAreCollected) {
  const auto dir = scratch("bad");
  std::string row = patient_row("P1", "2020-13-45");
  write(dir / "patients.csv", patients_csv_header() + row + patient_row("P2", "2020-01-01", "maybe"));
  write(dir / "samples.csv", "patient_id,channel_id,day,value\nP1,not_a_channel,3,1\nP2,pinch_count,3,abc\n");
  try {
    load_cohort_csv(dir);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 2, column enrollment_date"), std::string::npos) << msg;
    EXPECT_NE(msg.find("row 3, column label_w72"), std::string::npos) << msg;
    EXPECT_NE(msg.find("column channel_id"), std::string::npos) << msg;
    EXPECT_NE(msg.find("column value"), std::string::npos) << msg;
  }
}

TEST(CohortLoad, DuplicateIdIsSchemaError) {
  const auto dir = scratch("dup");
  write(dir / "patients.csv", patients_csv_header() + patient_row("P1", "2020-01-05") + patient_row("P1", "2020-01-06"));
  write(dir / "samples.csv", "patient_id,channel_id,day,value\n");
  EXPECT_THROW(load_cohort_csv(dir), SchemaError);
}

TEST(CohortLoad, MissingFileNamesPath) {
  const auto dir = scratch("missing");
  try {
    load_cohort(dir / "nope");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos);
  }
}

TEST(CohortRoundTrip, CsvAndJsonAreBitwise) {
  const Cohort c = generate(small_sim(3));
  const auto dir = scratch("rt");
  save_cohort(c, dir / "csv", CohortFormat::csv_pair);
  save_cohort(c, dir / "cohort.json", CohortFormat::json);
  const Cohort a = load_cohort(dir / "csv");
  const Cohort b = load_cohort(dir / "cohort.json");
  EXPECT_EQ(a.patients, c.patients);
  EXPECT_EQ(b.patients, c.patients);
  save_cohort(a, dir / "csv2", CohortFormat::csv_pair);
  EXPECT_EQ(load_cohort(dir / "csv2").patients, a.patients);
}

TEST(CohortValidation, EdssGridAndNhptRange) {
  PatientRecord p = simple_patient("A", {2020, 1, 1}, 3);
  EXPECT_TRUE(validate_record(p).empty());
  p.static_features[NumericField::edss] = 4.25;
  EXPECT_FALSE(validate_record(p).empty());
  p.static_features[NumericField::edss] = 4.5;
  p.static_features[NumericField::nhpt_min] = 20.0;
  p.static_features[NumericField::nhpt_max] = 25.0;
  p.static_features[NumericField::nhpt_range] = 4.0;
  EXPECT_FALSE(validate_record(p).empty());
  p.static_features[NumericField::nhpt_range] = 5.0;
  EXPECT_TRUE(validate_record(p).empty());
  p.channels[0].samples.push_back({0, 1.0});  // not increasing
  EXPECT_FALSE(validate_record(p).empty());
}

TEST(CohortFilter, GaitRuleCountsByDirectScan) {
  Cohort c;
  for (int i = 0; i < 10; ++i) c.patients.push_back(simple_patient("P" + std::to_string(i), {2020, 1, 1 + i}, i < 4 ? 0 : 1));
  FilterConfig rules = FilterConfig::none();
  rules.density = DensityRule{gait_channels(), 1, 1};
  std::size_t without_gait = 0;
  for (const auto& p : c.patients) {
    bool any = false;
    for (auto id : gait_channels())
      if (const auto* ch = p.channel(id); ch && !ch->samples.empty()) any = true;
    without_gait += !any;
  }
  const auto [kept, report] = filter_cohort(c, rules);
  EXPECT_EQ(kept.size(), 10 - without_gait);
  EXPECT_EQ(kept.size(), 6u);
  EXPECT_EQ(report.excluded[1].first, "density");
  EXPECT_EQ(report.excluded[1].second, 4u);
  EXPECT_EQ(report.to_json()["retained_count"], 6);
}

TEST(CohortFilter, EmptyRulesAreIdentity) {
  const Cohort c = generate(small_sim(5));
  const auto [kept, report] = filter_cohort(c, FilterConfig::none());
  EXPECT_EQ(kept, c);
  EXPECT_EQ(report.retained_count, c.size());
}

TEST(CohortFilter, MissingTargetLabelExcluded) {
  Cohort c;
  c.patients.push_back(simple_patient("A", {2020, 1, 1}, 9));
  c.patients.push_back(simple_patient("B", {2020, 1, 2}, 9));
  c.patients[1].label_w72.reset();
  FilterConfig rules = FilterConfig::none();
  rules.required_label = Target::w72;
  const auto [kept, report] = filter_cohort(c, rules);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept.patients[0].patient_id, "A");
  EXPECT_EQ(report.excluded.back(), (std::pair<std::string, std::size_t>{"label_w72", 1}));
}

TEST(CohortFilter, Idempotent) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SimConfig s = small_sim(seed);
    s.sparse_patient_frac = 0.3;
    const Cohort c = generate(s);
    FilterConfig rules;
    rules.required_static = {NumericField::age, NumericField::bmi};
    rules.required_label = Target::w48;
    const auto once = filter_cohort(c, rules).first;
    EXPECT_EQ(filter_cohort(once, rules).first, once);
    EXPECT_LT(once.size(), c.size());
  }
}

TEST(CohortFilter, DropsNonFiniteSamples) {
  Cohort c;
  c.patients.push_back(simple_patient("A", {2020, 1, 1}, 9));
  c.patients[0].channels[0].samples[2].value = std::nan("");
  const auto [kept, report] = filter_cohort(c, FilterConfig{});
  EXPECT_EQ(report.dropped_samples, 1u);
  EXPECT_EQ(kept.patients[0].channels[0].samples.size(), 8u);
}

TEST(TemporalSplit, BoundariesTiesAndPartition) {
  Cohort c;
  for (int i = 0; i < 10; ++i) c.patients.push_back(simple_patient("P" + std::to_string(i), {2020, 1, 1 + i}, 9));
  c.patients.push_back(simple_patient("T", {2020, 1, 8}, 9));  // shares a date with P7
  auto all = temporal_split(c, {2021, 1, 1});
  EXPECT_EQ(all.train.size(), c.size());
  EXPECT_TRUE(all.test.patients.empty());
  EXPECT_FALSE(all.warnings.empty());
  auto tie = temporal_split(c, {2020, 1, 8});
  for (const auto& p : tie.test.patients) EXPECT_GE(p.enrollment_date, (Date{2020, 1, 8}));
  std::size_t on_cutoff = 0;
  for (const auto& p : tie.test.patients) on_cutoff += p.enrollment_date == Date{2020, 1, 8};
  EXPECT_EQ(on_cutoff, 2u);
  EXPECT_EQ(tie.train.size() + tie.test.size(), c.size());
}

TEST(TemporalSplit, QuantileCutoffGivesRoughlyEightyTwenty) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SimConfig s = small_sim(seed);
    s.n_patients = 415;
    const Cohort c = generate(s);
    const auto split = temporal_split(c, quantile_cutoff(c, 0.8));
    const double frac = static_cast<double>(split.train.size()) / static_cast<double>(c.size());
    EXPECT_NEAR(frac, 0.8, 0.02);
    EXPECT_EQ(split.train.size() + split.test.size(), c.size());
  }
}

TEST(StaticEncoder, HandArithmetic) {
  Cohort c;
  c.patients.push_back(simple_patient("A", {2020, 1, 1}, 1));
  c.patients.push_back(simple_patient("B", {2020, 1, 2}, 1));
  c.patients[0].static_features[NumericField::age] = 2.0;
  c.patients[1].static_features[NumericField::age] = 4.0;
  c.patients[0].static_features.sex = "F";
  EncodingSpec spec{{NumericField::age, NumericField::bmi}, true};
  const auto enc = fit_static_encoder(c, spec);
  EXPECT_EQ(enc.numeric[0].mean, 3.0);
  EXPECT_EQ(enc.numeric[0].std, 1.0);
  EXPECT_TRUE(enc.numeric[1].all_missing);
  const auto t = encode_static(c, enc).table;
  EXPECT_EQ(t.column_names, (std::vector<std::string>{"AGE", "AGE__missing", "BBMI", "BBMI__missing", "SEX=F",
                                                       "SEX=M", "SEX__missing"}));
  EXPECT_EQ(t.matrix(0, 0), -1.0);
  EXPECT_EQ(t.matrix(1, 0), 1.0);
  EXPECT_EQ(t.matrix(0, 2), 0.0);
  EXPECT_EQ(t.matrix(0, 3), 1.0);
  EXPECT_EQ(t.matrix(0, 4) + t.matrix(0, 5), 1.0);
  EXPECT_EQ(t.matrix(1, 4) + t.matrix(1, 5), 1.0);
}

TEST(StaticEncoder, ZeroVarianceAndUnseenCategory) {
  Cohort c;
  c.patients.push_back(simple_patient("A", {2020, 1, 1}, 1));
  c.patients.push_back(simple_patient("B", {2020, 1, 2}, 1));
  const auto enc = fit_static_encoder(c, EncodingSpec{{NumericField::age}, true});
  EXPECT_TRUE(enc.numeric[0].zero_variance);
  EXPECT_EQ(enc.numeric[0].std, 1.0);
  Cohort other;
  other.patients.push_back(simple_patient("X", {2020, 1, 1}, 1));
  other.patients[0].static_features.sex = "X";
  const auto r = encode_static(other, enc);
  EXPECT_EQ(r.warnings.size(), 1u);
  EXPECT_EQ(r.table.matrix(0, 2), 0.0);  // SEX=M block
  EXPECT_EQ(r.table.matrix(0, 3), 0.0);  // not missing, just unseen
}

TEST(StaticEncoder, TrainingColumnsStandardized) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SimConfig s = small_sim(seed);
    s.n_patients = 120;
    const Cohort c = generate(s);
    const auto enc = fit_static_encoder(c, EncodingSpec::all());
    const auto t = encode_static(c, enc).table;
    for (std::size_t k = 0; k < enc.numeric.size(); ++k) {
      const auto& nc = enc.numeric[k];
      if (nc.zero_variance || nc.all_missing) continue;
      // Moments over the rows where the value is present.
      const auto col = static_cast<Eigen::Index>(2 * k);
      double sum = 0.0, sq = 0.0, n = 0.0;
      for (Eigen::Index i = 0; i < t.rows(); ++i)
        if (t.matrix(i, col + 1) == 0.0) {
          sum += t.matrix(i, col);
          sq += t.matrix(i, col) * t.matrix(i, col);
          n += 1.0;
        }
      EXPECT_NEAR(sum / n, 0.0, 1e-9) << kNumericFieldNames[k];
      EXPECT_NEAR(sq / n, 1.0, 1e-9) << kNumericFieldNames[k];
    }
  }
}

TEST(StaticEncoder, StateJsonRoundTrip) {
  const Cohort c = generate(small_sim(9));
  const auto enc = fit_static_encoder(c, EncodingSpec::all());
  EXPECT_EQ(EncoderState::from_json(nlohmann::json::parse(enc.to_json().dump())), enc);
}
