#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tedm/heads/heads.hpp"

namespace tedm::eval {

struct BinaryMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> values;  // 0 or 1, row-major

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}
  std::size_t count() const noexcept;
};

// One-vs-rest view of a single class.
BinaryMask class_mask(const heads::LabelMask& labels, int cls);

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion(const BinaryMask& pred, const BinaryMask& gt);

// Intersection form. Both masks empty counts as a perfect match.
double dice(const BinaryMask& pred, const BinaryMask& gt);

struct PrecisionRecall {
  double precision = 0.0, recall = 0.0;
};

// Both empty -> (1, 1). An empty denominator otherwise gives 0.
PrecisionRecall precision_recall(const BinaryMask& pred, const BinaryMask& gt);

struct SegMetrics {
  int cls = 1;
  double dice = 0.0, precision = 0.0, recall = 0.0;
};

// Metrics for every foreground class 1..K-1.
std::vector<SegMetrics> evaluate_mask(const heads::LabelMask& pred, const heads::LabelMask& gt);

struct WilcoxonResult {
  std::size_t n = 0;           // nonzero differences
  double w_plus = 0.0;         // rank sum of positive differences
  double statistic = 0.0;      // min(W+, W-)
  double p_value = 1.0;        // two-sided
  bool exact = true;
  bool significant = false;
};

inline constexpr std::size_t kExactWilcoxonLimit = 25;

// Signed-rank test on a - b with mid-ranks for ties and zero differences dropped.
WilcoxonResult wilcoxon_paired(const std::vector<double>& a, const std::vector<double>& b, double alpha = 0.05);

std::vector<double> bonferroni(const std::vector<double>& pvals, std::size_t m);

struct MetricRecord {
  std::string model;
  std::size_t n_train = 0;
  std::string domain;
  std::string metric;
  std::size_t image_id = 0;
  double value = 0.0;
};

struct SummaryRow {
  std::string model;
  std::size_t n_train = 0;
  std::string domain;
  std::string metric;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;      // sample standard deviation
  double p_vs_best = 1.0;  // adjusted; 1 for the best model itself
  bool best = false;
  bool bold = false;
};

struct AggregateOptions {
  double alpha = 0.05;
  std::size_t bonferroni_m = 1;
};

// Rows ordered by (metric, domain, n_train, model). Within each
// (metric, domain, n_train) the highest mean is best; bold marks the best and
// every model whose paired test against it is not significant.
std::vector<SummaryRow> aggregate_results(const std::vector<MetricRecord>& records,
                                          const AggregateOptions& options = {});

}  // namespace tedm::eval
