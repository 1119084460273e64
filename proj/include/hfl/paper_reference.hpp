#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hfl/model.hpp"

namespace hfl {

/// One published number with where it comes from.
struct PaperValue {
  std::string id;
  std::string citation;
  double value = 0;
  std::string unit;
};

/// Every reference number used by the reports.
const std::vector<PaperValue>& paper_values();
const PaperValue& paper_value(const std::string& id);

/// Published comparison row: params, memory, speed, error.
struct PaperComparisonRow {
  std::string method;
  double params_m = 0;
  double memory_mb = 0;
  double examples_per_sec = 0;
  double wer = 0;
};
const std::vector<PaperComparisonRow>& paper_comparison_rows();

/// A closed-form count at paper scale checked against a published value.
struct CountRow {
  std::string id;
  std::string label;
  std::int64_t count = 0;
  double paper = 0;           // parameters
  double tolerance_pct = 0;   // allowed |deviation|
  bool gated = true;          // false: reported only
  std::string citation;
  std::string note;

  double deviation_pct() const { return 100.0 * (static_cast<double>(count) - paper) / paper; }
  bool within() const;
};

/// Paper-scale count rows for tap counts, projector depths, comparison rows
/// and HFF heads. Head widths are reconstructed (projector 640, HFF final
/// 768, FP 512); adapters use bottlenecks 128/256/512.
std::vector<CountRow> paper_count_rows();

/// Model specs behind the rows that have one, keyed by row id.
std::optional<ModelSpec> paper_row_spec(const std::string& id);

}  // namespace hfl
