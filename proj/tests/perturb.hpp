#pragma once

#include <cmath>
#include <random>

#include "gpfusion/cohort.hpp"

namespace testutil {

using namespace gpfusion;

// Randomly rewrites every value of patients on the test side of the cutoff:
// static fields, sex, samples and labels. Enrollment dates are untouched so
// membership of the split is unchanged.
inline Cohort perturb_test_rows(Cohort c, const Date& cutoff, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& p : c.patients) {
    if (p.enrollment_date < cutoff) continue;
    auto& sf = p.static_features;
    for (std::size_t i = 0; i < kNumericFieldCount; ++i) {
      const auto f = static_cast<NumericField>(i);
      auto& v = sf.numeric[i];
      if (!v || f == NumericField::edss || f == NumericField::nhpt_range) continue;
      if (is_functional_score(f))
        *v = std::round(std::abs(*v + 2.0 * nd(rng)));
      else
        *v = std::abs(*v * (1.0 + 0.5 * nd(rng))) + 0.5;
    }
    if (sf[NumericField::edss]) sf[NumericField::edss] = 0.5 * std::round(std::min(20.0, std::abs(nd(rng)) * 6.0));
    if (sf[NumericField::nhpt_min] && sf[NumericField::nhpt_max]) {
      if (*sf[NumericField::nhpt_max] < *sf[NumericField::nhpt_min])
        std::swap(sf[NumericField::nhpt_max], sf[NumericField::nhpt_min]);
      if (sf[NumericField::nhpt_range]) sf[NumericField::nhpt_range] = *sf[NumericField::nhpt_max] - *sf[NumericField::nhpt_min];
    }
    p.static_features.sex = nd(rng) > 0 ? "F" : "M";
    for (auto& ch : p.channels)
      for (auto& s : ch.samples) s.value += 10.0 * nd(rng);
    if (p.label_w48) p.label_w48 = !*p.label_w48;
    if (p.label_w72) p.label_w72 = !*p.label_w72;
  }
  return c;
}

}  // namespace testutil
