#include <doctest.h>

#include <cmath>
#include <functional>

#include "tedm/eval/metrics.hpp"
#include "tedm/rng.hpp"

using namespace tedm;
using namespace tedm::eval;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kOk;
}

BinaryMask random_mask(Rng& rng, std::size_t h, std::size_t w, double density) {
  BinaryMask m(h, w);
  for (auto& v : m.values) v = rng.uniform() < density;
  return m;
}

// Enumerates every sign assignment of the mid-ranks of |d|.
double brute_force_p(const std::vector<double>& d) {
  std::vector<double> nz;
  for (double x : d)
    if (x != 0.0) nz.push_back(x);
  const std::size_t n = nz.size();
  if (n == 0) return 1.0;
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(nz[j]) < std::abs(nz[i])) ++less;
      if (std::abs(nz[j]) == std::abs(nz[i])) ++equal;
    }
    rank[i] = less + (equal + 1) / 2.0;
  }
  double total = 0, observed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += rank[i];
    if (nz[i] > 0) observed += rank[i];
  }
  const double center = total / 2.0;
  std::size_t extreme = 0;
  for (std::size_t signs = 0; signs < (std::size_t{1} << n); ++signs) {
    double w = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (signs >> i & 1) w += rank[i];
    if (std::abs(w - center) >= std::abs(observed - center) - 1e-12) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(std::size_t{1} << n);
}

std::vector<double> minus(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

}  // namespace

TEST_CASE("dice") {
  BinaryMask a(2, 4), b(2, 4);
  a.values = {1, 1, 1, 1, 0, 0, 0, 0};
  CHECK(dice(a, a) == 1.0);
  b.values = {0, 0, 0, 0, 1, 1, 1, 1};
  CHECK(dice(a, b) == 0.0);
  b.values = {0, 0, 1, 1, 1, 1, 0, 0};
  CHECK(dice(a, b) == 0.5);
  CHECK(dice(BinaryMask(3, 3), BinaryMask(3, 3)) == 1.0);
  CHECK(dice(BinaryMask(3, 3), BinaryMask(3, 3, 1)) == 0.0);
  CHECK(code_of([&] { dice(BinaryMask(2, 4), BinaryMask(4, 2)); }) == ErrorCode::kShapeError);
}

TEST_CASE("precision and recall") {
  BinaryMask gt(4, 4);
  for (std::size_t i = 0; i < 8; ++i) gt.values[i] = 1;
  const auto perfect = precision_recall(gt, gt);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  const auto all = precision_recall(BinaryMask(4, 4, 1), gt);
  CHECK(all.precision == 0.5);
  CHECK(all.recall == 1.0);

  const auto both_empty = precision_recall(BinaryMask(4, 4), BinaryMask(4, 4));
  CHECK(both_empty.precision == 1.0);
  CHECK(both_empty.recall == 1.0);
  const auto pred_empty = precision_recall(BinaryMask(4, 4), gt);
  CHECK(pred_empty.precision == 0.0);
  CHECK(pred_empty.recall == 0.0);
  const auto gt_empty = precision_recall(gt, BinaryMask(4, 4));
  CHECK(gt_empty.precision == 0.0);
  CHECK(gt_empty.recall == 0.0);
  CHECK(code_of([&] { precision_recall(BinaryMask(4, 4), BinaryMask(4, 5)); }) == ErrorCode::kShapeError);

  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_mask(rng, 8, 8, rng.uniform()), g = random_mask(rng, 8, 8, rng.uniform());
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const bool pv = p.values[y * 8 + x], gv = g.values[y * 8 + x];
        tp += pv && gv;
        fp += pv && !gv;
        fn += !pv && gv;
      }
    const auto pr = precision_recall(p, g);
    if (tp + fp > 0) CHECK(pr.precision == static_cast<double>(tp) / static_cast<double>(tp + fp));
    if (tp + fn > 0) CHECK(pr.recall == static_cast<double>(tp) / static_cast<double>(tp + fn));
  }
}

TEST_CASE("dice properties on random masks") {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t h = rng.uniform_int(1, 9), w = rng.uniform_int(1, 9);
    const auto p = random_mask(rng, h, w, rng.uniform()), g = random_mask(rng, h, w, rng.uniform());
    const double d = dice(p, g);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(d == dice(g, p));
    const auto pr = precision_recall(p, g);
    const double hm = pr.precision + pr.recall > 0 ? 2 * pr.precision * pr.recall / (pr.precision + pr.recall) : 0.0;
    if (p.count() + g.count() > 0) CHECK(d == doctest::Approx(hm).epsilon(1e-12));
  }
}

TEST_CASE("per-class evaluation") {
  heads::LabelMask gt(2, 3, 3), pred(2, 3, 3);
  gt.labels = {0, 1, 1, 2, 2, 0};
  pred.labels = {0, 1, 2, 2, 2, 0};
  const auto m = evaluate_mask(pred, gt);
  REQUIRE(m.size() == 2);
  CHECK(m[0].cls == 1);
  CHECK(m[0].dice == doctest::Approx(2.0 / 3.0));
  CHECK(m[1].dice == doctest::Approx(0.8));
  CHECK(m[1].precision == doctest::Approx(2.0 / 3.0));
  CHECK(m[1].recall == 1.0);
}

TEST_CASE("wilcoxon exact p-values") {
  SUBCASE("identical sequences") {
    const std::vector<double> a{0.3, 0.5, 0.9};
    const auto r = wilcoxon_paired(a, a);
    CHECK(r.n == 0);
    CHECK(r.p_value == 1.0);
    CHECK_FALSE(r.significant);
  }
  SUBCASE("five positive differences") {
    const auto r = wilcoxon_paired({1, 2, 3, 4, 5}, {0, 0, 0, 0, 0});
    CHECK(r.p_value == doctest::Approx(2.0 / 32.0).epsilon(1e-15));
    CHECK(r.w_plus == 15.0);
    CHECK(r.statistic == 0.0);
    CHECK_FALSE(r.significant);
  }
  SUBCASE("level") {
    // six positive differences: p = 2/64 = 0.03125
    const auto r = wilcoxon_paired({1, 2, 3, 4, 5, 6}, std::vector<double>(6, 0.0), 0.05);
    CHECK(r.p_value == doctest::Approx(0.03125));
    CHECK(r.significant);
  }
  SUBCASE("length mismatch") {
    CHECK(code_of([] { wilcoxon_paired({1, 2}, {1}); }) == ErrorCode::kShapeError);
    CHECK(code_of([] { wilcoxon_paired({}, {}); }) == ErrorCode::kShapeError);
  }
  SUBCASE("matches full enumeration, ties included") {
    Rng rng(21);
    for (int trial = 0; trial < 300; ++trial) {
      const std::size_t n = rng.uniform_int(1, 10);
      std::vector<double> a(n), b(n);
      for (std::size_t i = 0; i < n; ++i) {
        // small integer grid forces ties and zeros
        a[i] = static_cast<double>(rng.uniform_int(0, 4));
        b[i] = static_cast<double>(rng.uniform_int(0, 4));
      }
      const auto r = wilcoxon_paired(a, b);
      CHECK(r.exact);
      CHECK(r.p_value == doctest::Approx(brute_force_p(minus(a, b))).epsilon(1e-12));
      CHECK(r.p_value > 0.0);
      CHECK(r.p_value <= 1.0);
    }
  }
  SUBCASE("swap symmetry and rescaling invariance") {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = rng.uniform_int(1, 30);
      std::vector<double> a(n), b(n);
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = std::round(rng.normal(0.2, 1) * 4) / 4;
        b[i] = std::round(rng.normal(0, 1) * 4) / 4;
      }
      const double p = wilcoxon_paired(a, b).p_value;
      CHECK(wilcoxon_paired(b, a).p_value == doctest::Approx(p).epsilon(1e-12));
      std::vector<double> a2(n), b2(n);
      for (std::size_t i = 0; i < n; ++i) {
        a2[i] = 8 * a[i];  // exact in binary, keeps ties intact
        b2[i] = 8 * b[i];
      }
      CHECK(wilcoxon_paired(a2, b2).p_value == doctest::Approx(p).epsilon(1e-12));
    }
  }
}

TEST_CASE("wilcoxon normal approximation") {
  // 30 positive distinct differences, well into the tail
  std::vector<double> a(30), b(30, 0.0);
  for (std::size_t i = 0; i < 30; ++i) a[i] = static_cast<double>(i + 1);
  const auto r = wilcoxon_paired(a, b);
  CHECK_FALSE(r.exact);
  const double mean = 30 * 31 / 4.0, sd = std::sqrt(30 * 31 * 61 / 24.0);
  CHECK(r.p_value == doctest::Approx(std::erfc((465 - mean) / sd / std::sqrt(2.0))).epsilon(1e-12));

  // at n = 25 the exact and approximate tails are already close
  std::vector<double> c(26), d(26, 0.0);
  for (std::size_t i = 0; i < 26; ++i) c[i] = (i % 3 == 0 ? -1.0 : 1.0) * static_cast<double>(i + 1);
  std::vector<double> c25(c.begin(), c.end() - 1), d25(25, 0.0);
  const auto exact = wilcoxon_paired(c25, d25), approx = wilcoxon_paired(c, d);
  CHECK(exact.exact);
  CHECK_FALSE(approx.exact);
  CHECK(std::abs(exact.p_value - approx.p_value) < 0.1);

  // tie correction: variance shrinks by sum(t^3 - t)/48
  std::vector<double> e(40, 1.0), f(40, 0.0);
  for (std::size_t i = 0; i < 12; ++i) e[i] = -1.0;
  const auto t = wilcoxon_paired(e, f);
  const double n = 40, var = n * (n + 1) * (2 * n + 1) / 24 - (n * n * n - n) / 48;
  const double w = 28 * 20.5;
  CHECK(t.w_plus == w);
  CHECK(t.p_value == doctest::Approx(std::erfc(std::abs(w - n * (n + 1) / 4) / std::sqrt(var) / std::sqrt(2.0))));
}

TEST_CASE("bonferroni") {
  CHECK(bonferroni({0.2, 0.7}, 1) == std::vector<double>{0.2, 0.7});
  CHECK(bonferroni({0.01}, 5)[0] == doctest::Approx(0.05));
  CHECK(bonferroni({0.5}, 4)[0] == 1.0);
  CHECK(code_of([] { bonferroni({1.5}, 2); }) == ErrorCode::kRangeError);
  CHECK(code_of([] { bonferroni({-0.1}, 2); }) == ErrorCode::kRangeError);
  CHECK(code_of([] { bonferroni({0.1}, 0); }) == ErrorCode::kRangeError);
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const double p = rng.uniform(), q = rng.uniform();
    const std::size_t m = rng.uniform_int(1, 20), m2 = m + rng.uniform_int(0, 5);
    const auto adj = bonferroni({p, q}, m);
    CHECK(adj[0] >= p);
    CHECK(adj[0] <= 1.0);
    if (p <= q) CHECK(adj[0] <= adj[1]);
    CHECK(bonferroni({p}, m2)[0] >= adj[0]);
  }
}

TEST_CASE("aggregate_results") {
  auto records = [](const std::string& model, const std::vector<double>& v) {
    std::vector<MetricRecord> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back({model, 10, "A", "dice", i, v[i]});
    return out;
  };
  SUBCASE("single model") {
    const auto rows = aggregate_results(records("m", {0.5, 0.7, 0.9}));
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].bold);
    CHECK(rows[0].best);
    CHECK(rows[0].mean == doctest::Approx(0.7));
    CHECK(rows[0].std == doctest::Approx(0.2));
  }
  SUBCASE("identical models both bold") {
    auto r = records("a", {0.5, 0.6, 0.7});
    auto s = records("b", {0.5, 0.6, 0.7});
    r.insert(r.end(), s.begin(), s.end());
    const auto rows = aggregate_results(r);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].bold);
    CHECK(rows[1].bold);
    CHECK(rows[1].p_vs_best == 1.0);
  }
  SUBCASE("three models, one significant comparison") {
    const std::vector<double> best{0.90, 0.91, 0.92, 0.93, 0.94, 0.95};
    const std::vector<double> worse{0.80, 0.80, 0.80, 0.80, 0.80, 0.80};  // all six below
    const std::vector<double> close{0.95, 0.86, 0.96, 0.88, 0.90, 0.94};  // mixed signs
    auto r = records("best", best);
    for (const auto& [name, v] : {std::pair{"worse", worse}, std::pair{"close", close}}) {
      auto s = records(name, v);
      r.insert(r.end(), s.begin(), s.end());
    }
    const auto rows = aggregate_results(r);
    REQUIRE(rows.size() == 3);
    for (const auto& row : rows) {
      if (row.model == "best") {
        CHECK(row.best);
        CHECK(row.bold);
      } else {
        const double p = brute_force_p(minus(best, row.model == "worse" ? worse : close));
        CHECK(row.p_vs_best == doctest::Approx(p));
        CHECK(row.bold == (p >= 0.05));
      }
    }
    const auto find = [&](const std::string& m) {
      return *std::find_if(rows.begin(), rows.end(), [&](const auto& x) { return x.model == m; });
    };
    CHECK_FALSE(find("worse").bold);
    CHECK(find("close").bold);

    // Bonferroni with m = 4 lifts 0.03125 to 0.125
    const auto adjusted = aggregate_results(r, {.alpha = 0.05, .bonferroni_m = 4});
    for (const auto& row : adjusted)
      if (row.model == "worse") {
        CHECK(row.p_vs_best == doctest::Approx(0.125));
        CHECK(row.bold);
      }
  }
  SUBCASE("groups are separate") {
    auto r = records("a", {0.5, 0.6});
    r.push_back({"a", 20, "A", "dice", 0, 0.1});
    r.push_back({"a", 10, "B", "dice", 0, 0.2});
    const auto rows = aggregate_results(r);
    CHECK(rows.size() == 3);
    for (const auto& row : rows) CHECK(row.bold);
  }
  SUBCASE("errors") {
    CHECK(code_of([] { aggregate_results({}); }) == ErrorCode::kEmptyGroup);
    auto r = records("a", {0.5, 0.6});
    r.push_back({"b", 10, "A", "dice", 7, 0.2});
    CHECK(code_of([&] { aggregate_results(r); }) == ErrorCode::kShapeError);
  }
}
