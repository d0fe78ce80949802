#include "tedm/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include "tedm/error.hpp"

namespace tedm::eval {

std::size_t BinaryMask::count() const noexcept {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
}

BinaryMask class_mask(const heads::LabelMask& labels, int cls) {
  require(cls >= 0 && cls < labels.n_classes, ErrorCode::kRangeError, "class index out of range");
  BinaryMask m(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.pixels(); ++i) m.values[i] = labels.labels[i] == cls;
  return m;
}

Confusion confusion(const BinaryMask& pred, const BinaryMask& gt) {
  require(pred.height == gt.height && pred.width == gt.width && pred.values.size() == gt.values.size(),
          ErrorCode::kShapeError, "mask shapes differ");
  Confusion c;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool p = pred.values[i] != 0, g = gt.values[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  const auto c = confusion(pred, gt);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

PrecisionRecall precision_recall(const BinaryMask& pred, const BinaryMask& gt) {
  const auto c = confusion(pred, gt);
  if (c.tp + c.fp + c.fn == 0) return {1.0, 1.0};
  auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  return {ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn)};
}

std::vector<SegMetrics> evaluate_mask(const heads::LabelMask& pred, const heads::LabelMask& gt) {
  require(pred.height == gt.height && pred.width == gt.width, ErrorCode::kShapeError, "mask shapes differ");
  require(pred.n_classes == gt.n_classes, ErrorCode::kShapeError, "class counts differ");
  std::vector<SegMetrics> out;
  for (int k = 1; k < gt.n_classes; ++k) {
    const auto p = class_mask(pred, k), g = class_mask(gt, k);
    const auto pr = precision_recall(p, g);
    out.push_back({k, dice(p, g), pr.precision, pr.recall});
  }
  return out;
}

namespace {

// Two-sided exact p from the null distribution of the doubled rank sum,
// built by dynamic programming over sign assignments.
double exact_p(const std::vector<std::size_t>& doubled_ranks, std::size_t observed_doubled) {
  const std::size_t total = std::accumulate(doubled_ranks.begin(), doubled_ranks.end(), std::size_t{0});
  std::vector<double> ways(total + 1, 0.0);
  ways[0] = 1.0;
  std::size_t reach = 0;
  for (auto r : doubled_ranks) {
    for (std::size_t s = reach + 1; s-- > 0;)
      if (ways[s] != 0.0) ways[s + r] += ways[s];
    reach += r;
  }
  // Null distribution is symmetric about total/2, in doubled units total.
  const auto dev = [&](std::size_t s) { return std::llabs(2 * static_cast<long long>(s) - static_cast<long long>(total)); };
  const long long obs = dev(observed_doubled);
  double hits = 0.0;
  for (std::size_t s = 0; s <= total; ++s)
    if (dev(s) >= obs) hits += ways[s];
  return std::min(1.0, hits / std::ldexp(1.0, static_cast<int>(doubled_ranks.size())));
}

}  // namespace

WilcoxonResult wilcoxon_paired(const std::vector<double>& a, const std::vector<double>& b, double alpha) {
  require(a.size() == b.size(), ErrorCode::kShapeError, "paired sequences differ in length");
  require(!a.empty(), ErrorCode::kShapeError, "paired sequences are empty");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);

  WilcoxonResult r;
  r.n = d.size();
  if (r.n == 0) return r;

  std::vector<std::size_t> order(r.n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<std::size_t> doubled(r.n);  // 2 * mid-rank is always an integer
  double tie_term = 0.0;
  for (std::size_t i = 0; i < r.n;) {
    std::size_t j = i;
    while (j + 1 < r.n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    for (std::size_t k = i; k <= j; ++k) doubled[order[k]] = i + j + 2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  std::size_t plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < r.n; ++i) {
    total2 += doubled[i];
    if (d[i] > 0) plus2 += doubled[i];
  }
  r.w_plus = plus2 / 2.0;
  r.statistic = std::min(plus2, total2 - plus2) / 2.0;

  if (r.n <= kExactWilcoxonLimit) {
    r.p_value = exact_p(doubled, plus2);
  } else {
    const double n = static_cast<double>(r.n);
    const double mean = n * (n + 1) / 4.0;
    const double var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0;
    r.exact = false;
    r.p_value = var > 0 ? std::min(1.0, std::erfc(std::abs(r.w_plus - mean) / std::sqrt(var) / std::sqrt(2.0))) : 1.0;
  }
  r.significant = r.p_value < alpha;
  return r;
}

std::vector<double> bonferroni(const std::vector<double>& pvals, std::size_t m) {
  require(m >= 1, ErrorCode::kRangeError, "Bonferroni m must be positive");
  std::vector<double> out;
  out.reserve(pvals.size());
  for (double p : pvals) {
    require(p >= 0.0 && p <= 1.0, ErrorCode::kRangeError, "p-value outside [0,1]");
    out.push_back(std::min(1.0, static_cast<double>(m) * p));
  }
  return out;
}

std::vector<SummaryRow> aggregate_results(const std::vector<MetricRecord>& records, const AggregateOptions& options) {
  using Cell = std::tuple<std::string, std::string, std::size_t>;  // metric, domain, n_train
  std::map<Cell, std::map<std::string, std::map<std::size_t, double>>> cells;
  for (const auto& r : records) {
    auto& slot = cells[{r.metric, r.domain, r.n_train}][r.model];
    require(slot.emplace(r.image_id, r.value).second, ErrorCode::kShapeError,
            "duplicate record for " + r.model + " image " + std::to_string(r.image_id));
  }
  require(!cells.empty(), ErrorCode::kEmptyGroup, "no records to aggregate");

  std::vector<SummaryRow> rows;
  for (const auto& [cell, models] : cells) {
    const auto& [metric, domain, n_train] = cell;
    std::vector<SummaryRow> group;
    for (const auto& [model, per_image] : models) {
      require(!per_image.empty(), ErrorCode::kEmptyGroup, "empty group for " + model);
      SummaryRow row{model, n_train, domain, metric, per_image.size()};
      for (const auto& [id, v] : per_image) row.mean += v;
      row.mean /= static_cast<double>(row.n);
      if (row.n > 1) {
        double ss = 0.0;
        for (const auto& [id, v] : per_image) ss += (v - row.mean) * (v - row.mean);
        row.std = std::sqrt(ss / static_cast<double>(row.n - 1));
      }
      group.push_back(row);
    }
    // std::map order makes ties in the mean resolve to the first model name.
    std::size_t best = 0;
    for (std::size_t i = 1; i < group.size(); ++i)
      if (group[i].mean > group[best].mean) best = i;
    group[best].best = group[best].bold = true;

    const auto& best_scores = models.at(group[best].model);
    std::vector<double> a;
    for (const auto& [id, v] : best_scores) a.push_back(v);
    for (std::size_t i = 0; i < group.size(); ++i) {
      if (i == best) continue;
      const auto& scores = models.at(group[i].model);
      require(scores.size() == best_scores.size() &&
                  std::equal(scores.begin(), scores.end(), best_scores.begin(),
                             [](const auto& x, const auto& y) { return x.first == y.first; }),
              ErrorCode::kShapeError, "models were evaluated on different images");
      std::vector<double> b;
      for (const auto& [id, v] : scores) b.push_back(v);
      const double p = wilcoxon_paired(a, b, options.alpha).p_value;
      group[i].p_vs_best = bonferroni({p}, options.bonferroni_m)[0];
      group[i].bold = !(group[i].p_vs_best < options.alpha);
    }
    rows.insert(rows.end(), group.begin(), group.end());
  }
  return rows;
}

}  // namespace tedm::eval
