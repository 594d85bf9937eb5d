#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include <json.hpp>

#include "cohort.hpp"
#include "feature_table.hpp"

namespace gpfusion {

// Which static columns enter the encoded table.
struct EncodingSpec {
  std::vector<NumericField> numeric;
  bool include_sex = true;

  static EncodingSpec all() {
    EncodingSpec s;
    for (std::size_t i = 0; i < kNumericFieldCount; ++i)
      s.numeric.push_back(static_cast<NumericField>(i));
    return s;
  }
};

struct NumericColumnState {
  NumericField field{};
  double mean = 0.0;
  double std = 1.0;  // population std over present training values
  bool zero_variance = false;
  bool all_missing = false;
};

// Standard scaling + mean imputation with a missing-indicator column for every
// numeric field; one-hot (plus missing indicator) for sex. Immutable after fit.
struct EncoderState {
  std::vector<NumericColumnState> numeric;
  bool include_sex = true;
  std::vector<std::string> sex_categories;  // sorted

  [[nodiscard]] std::vector<std::string> column_names() const {
    std::vector<std::string> names;
    for (const auto& c : numeric) {
      names.emplace_back(field_name(c.field));
      names.push_back(std::string(field_name(c.field)) + "__missing");
    }
    if (include_sex) {
      for (const auto& cat : sex_categories) names.push_back(std::string(kSexColumn) + "=" + cat);
      names.push_back(std::string(kSexColumn) + "__missing");
    }
    return names;
  }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    j["numeric"] = nlohmann::json::array();
    for (const auto& c : numeric)
      j["numeric"].push_back({{"field", field_name(c.field)},
                              {"mean", c.mean},
                              {"std", c.std},
                              {"zero_variance", c.zero_variance},
                              {"all_missing", c.all_missing}});
    j["include_sex"] = include_sex;
    j["sex_categories"] = sex_categories;
    return j;
  }

  static EncoderState from_json(const nlohmann::json& j) {
    EncoderState s;
    for (const auto& c : j.at("numeric")) {
      auto f = numeric_field_from_name(c.at("field").get<std::string>());
      if (!f) throw ParseError("encoder state: unknown field " + c.at("field").dump());
      s.numeric.push_back(NumericColumnState{*f, c.at("mean").get<double>(),
                                             c.at("std").get<double>(),
                                             c.at("zero_variance").get<bool>(),
                                             c.at("all_missing").get<bool>()});
    }
    s.include_sex = j.at("include_sex").get<bool>();
    s.sex_categories = j.at("sex_categories").get<std::vector<std::string>>();
    return s;
  }

  friend bool operator==(const EncoderState& a, const EncoderState& b) {
    return a.to_json() == b.to_json();
  }
};

inline EncoderState fit_static_encoder(const Cohort& train, const EncodingSpec& spec) {
  if (train.patients.empty()) throw Error("fit_static_encoder: empty training cohort");
  EncoderState st;
  for (auto f : spec.numeric) {
    NumericColumnState col{f};
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : train.patients)
      if (auto v = p.static_features[f]) {
        sum += *v;
        ++n;
      }
    if (n == 0) {
      col.all_missing = true;
      col.mean = 0.0;
      col.std = 1.0;
    } else {
      col.mean = sum / static_cast<double>(n);
      double ss = 0.0;
      for (const auto& p : train.patients)
        if (auto v = p.static_features[f]) ss += (*v - col.mean) * (*v - col.mean);
      col.std = std::sqrt(ss / static_cast<double>(n));
      if (!(col.std > 0.0)) {
        col.std = 1.0;
        col.zero_variance = true;
      }
    }
    st.numeric.push_back(col);
  }
  st.include_sex = spec.include_sex;
  if (spec.include_sex) {
    for (const auto& p : train.patients)
      if (p.static_features.sex) st.sex_categories.push_back(*p.static_features.sex);
    std::sort(st.sex_categories.begin(), st.sex_categories.end());
    st.sex_categories.erase(std::unique(st.sex_categories.begin(), st.sex_categories.end()),
                            st.sex_categories.end());
  }
  return st;
}

struct EncodeResult {
  FeatureTable table;
  std::vector<std::string> warnings;  // e.g. unseen categories
};

inline EncodeResult encode_static(const Cohort& c, const EncoderState& enc) {
  EncodeResult r;
  r.table.column_names = enc.column_names();
  r.table.matrix = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c.size()),
                                         static_cast<Eigen::Index>(r.table.column_names.size()));
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& p = c.patients[i];
    const auto row = static_cast<Eigen::Index>(i);
    r.table.row_ids.push_back(p.patient_id);
    Eigen::Index col = 0;
    for (const auto& nc : enc.numeric) {
      const auto v = p.static_features[nc.field];
      r.table.matrix(row, col++) = v ? (*v - nc.mean) / nc.std : 0.0;
      r.table.matrix(row, col++) = v ? 0.0 : 1.0;
    }
    if (enc.include_sex) {
      const auto& sex = p.static_features.sex;
      if (sex) {
        auto it = std::find(enc.sex_categories.begin(), enc.sex_categories.end(), *sex);
        if (it != enc.sex_categories.end()) {
          r.table.matrix(row, col + (it - enc.sex_categories.begin())) = 1.0;
        } else {
          r.warnings.push_back("patient '" + p.patient_id + "': unseen SEX category '" + *sex +
                               "' encoded as zeros");
          log_warn(r.warnings.back());
        }
      }
      col += static_cast<Eigen::Index>(enc.sex_categories.size());
      r.table.matrix(row, col++) = sex ? 0.0 : 1.0;
    }
  }
  r.table.check();
  return r;
}

}  // namespace gpfusion
