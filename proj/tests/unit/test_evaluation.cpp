#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "stainfuse/error.hpp"
#include "stainfuse/evaluation.hpp"
#include "stainfuse/fusion.hpp"
#include "stainfuse/random.hpp"

using namespace stainfuse;

namespace {

CohortPredictions cohort_of(const std::vector<std::pair<double, int>>& rows) {
  CohortPredictions c;
  c.cohort_id = "c";
  int i = 0;
  for (const auto& [score, label] : rows) {
    c.entries.push_back({"s" + std::to_string(i++), score,
                         label ? BinaryLabel::Melanoma : BinaryLabel::Nevus});
  }
  return c;
}

// Pair counting over every (melanoma, nevus) pair.
double brute_auroc(const CohortPredictions& c) {
  double credit = 0.0;
  int pairs = 0;
  for (const auto& p : c.entries) {
    if (p.label != BinaryLabel::Melanoma) continue;
    for (const auto& n : c.entries) {
      if (n.label != BinaryLabel::Nevus) continue;
      ++pairs;
      credit += p.score > n.score ? 1.0 : (p.score == n.score ? 0.5 : 0.0);
    }
  }
  return credit / pairs;
}

CohortPredictions random_cohort(Engine& engine, int n) {
  std::vector<std::pair<double, int>> rows;
  for (int i = 0; i < n; ++i) {
    // Coarse grid so ties are common.
    rows.emplace_back(std::floor(uniform01(engine) * 10) / 10, uniform01(engine) < 0.5);
  }
  rows[0].second = 0;
  rows[1].second = 1;
  return cohort_of(rows);
}

}  // namespace

TEST_CASE("AUROC small hand cases") {
  CHECK(auroc(cohort_of({{0.1, 0}, {0.9, 1}})) == 1.0);
  CHECK(auroc(cohort_of({{0.9, 0}, {0.1, 1}})) == 0.0);
  CHECK(auroc(cohort_of({{0.5, 0}, {0.5, 1}})) == 0.5);
  CHECK(auroc(cohort_of({{0.1, 0}, {0.4, 1}, {0.35, 0}, {0.8, 1}})) == 1.0);
  CHECK(auroc(cohort_of({{0.1, 0}, {0.3, 1}, {0.35, 0}, {0.8, 1}})) == 0.75);
  CHECK_THROWS_WITH_AS(auroc(cohort_of({{0.1, 1}, {0.2, 1}})), doctest::Contains("AUROC undefined"),
                       Error);
}

TEST_CASE("AUROC matches brute-force pair counting") {
  Engine engine = make_engine(123);
  for (int trial = 0; trial < 300; ++trial) {
    const CohortPredictions c = random_cohort(engine, 2 + trial % 39);
    CHECK(std::abs(auroc(c) - brute_auroc(c)) <= 1e-12);
    // Area under the sweep curve agrees with the rank statistic.
    CHECK(std::abs(trapezoid_area(roc_curve(c.entries)) - auroc(c)) <= 1e-12);
  }
}

TEST_CASE("AUROC is invariant under strictly increasing maps") {
  Engine engine = make_engine(9);
  for (int trial = 0; trial < 50; ++trial) {
    CohortPredictions c = random_cohort(engine, 30);
    const double base = auroc(c);
    const double t = 0.01 + 0.98 * uniform01(engine);
    for (auto& e : c.entries) e.score = calibrate_score(e.score, t);
    CHECK(std::abs(auroc(c) - base) <= 1e-12);
    for (auto& e : c.entries) e.score = std::pow(e.score, 3.0);
    CHECK(std::abs(auroc(c) - base) <= 1e-12);
  }
}

TEST_CASE("ROC curve shape") {
  const auto c = cohort_of({{0.2, 0}, {0.6, 1}, {0.6, 0}, {0.9, 1}});
  const auto curve = roc_curve(c.entries);
  REQUIRE(curve.size() == 4);
  CHECK(curve.front() == RocPoint{0, 0});
  CHECK(curve[1] == RocPoint{0, 0.5});
  CHECK(curve[2] == RocPoint{0.5, 1});
  CHECK(curve.back() == RocPoint{1, 1});
  for (std::size_t i = 1; i < curve.size(); ++i) {
    CHECK(curve[i].fpr >= curve[i - 1].fpr);
    CHECK(curve[i].tpr >= curve[i - 1].tpr);
  }
}

TEST_CASE("AUROC CI is deterministic and order independent") {
  Engine engine = make_engine(5);
  CohortPredictions c = random_cohort(engine, 40);
  const BootstrapConfig cfg{2000, 0.05, 42};
  const AurocInterval a = auroc_ci(c, cfg, 1);
  const AurocInterval b = auroc_ci(c, cfg, 4);
  CHECK(a.low == b.low);
  CHECK(a.high == b.high);
  std::reverse(c.entries.begin(), c.entries.end());
  const AurocInterval r = auroc_ci(c, cfg, 16);
  CHECK(r.low == a.low);
  CHECK(r.high == a.high);
  CHECK(a.low <= auroc(c));
  CHECK(a.high >= auroc(c));
}

TEST_CASE("single-class bootstrap replicates are dropped and counted") {
  const auto c = cohort_of({{0.1, 0}, {0.2, 0}, {0.3, 0}, {0.4, 0}, {0.5, 0}, {0.6, 0}, {0.9, 1}});
  const AurocInterval ci = auroc_ci(c, {1000, 0.05, 1});
  // P(no melanoma drawn) = (6/7)^7, about 0.34.
  CHECK(ci.n_dropped > 250);
  CHECK(ci.n_dropped < 430);
  CHECK_THROWS_AS(auroc_ci(cohort_of({{0.1, 0}, {0.2, 0}}), {100, 0.05, 1}), Error);
}

TEST_CASE("evaluate_cohort fills the result") {
  const auto c = cohort_of({{0.1, 0}, {0.3, 1}, {0.35, 0}, {0.8, 1}, {0.2, 0}, {0.7, 1}});
  const RocResult r = evaluate_cohort(c, {500, 0.05, 3}, "m");
  CHECK(r.model_id == "m");
  CHECK(r.cohort_id == "c");
  CHECK(r.n == 6);
  CHECK(r.n_boot == 500);
  CHECK(r.seed == 3);
  CHECK(r.auroc == doctest::Approx(8.0 / 9.0));

  RocResult sig;
  sig.ci_low = 0.51;
  sig.ci_high = 0.9;
  CHECK(significance_vs_random(sig));
  sig.ci_low = 0.5;
  CHECK_FALSE(significance_vs_random(sig));
}

TEST_CASE("cohort validation") {
  auto c = cohort_of({{0.1, 0}, {0.3, 1}});
  c.entries[1].slide_id = "s0";
  CHECK_THROWS_WITH(c.validate(), doctest::Contains("duplicate"));
  c = cohort_of({{0.1, 0}, {1.3, 1}});
  CHECK_THROWS_WITH(c.validate(), doctest::Contains("outside [0, 1]"));
}

TEST_CASE("Youden threshold") {
  const auto c = cohort_of({{0.1, 0}, {0.2, 0}, {0.3, 1}, {0.35, 0}, {0.8, 1}, {0.9, 1}});
  const auto cand = threshold_candidates(c.entries);
  CHECK(cand.front() == 1e-6);
  CHECK(cand.back() == 1.0 - 1e-6);
  CHECK(cand.size() == 7);
  CHECK(youden_j(c.entries, 1e-6) == 0.0);

  // Brute force over the candidates, smallest threshold wins ties.
  double best_j = -2.0, best_t = 0.0;
  for (double t : cand) {
    const double j = youden_j(c.entries, t);
    if (j > best_j) best_j = j, best_t = t;
  }
  const DecisionThreshold d = select_threshold(c);
  CHECK(d.value == best_t);
  CHECK(d.youden_j == best_j);
  CHECK(d.value == doctest::Approx(0.25));
  CHECK(d.youden_j == doctest::Approx(2.0 / 3.0));
  CHECK(d.method == "youden");
  CHECK(d.source_cohort == "c");

  const auto perfect = cohort_of({{0.2, 0}, {0.4, 1}});
  CHECK(select_threshold(perfect).value == doctest::Approx(0.3));
  CHECK(select_threshold(perfect).youden_j == 1.0);
}

TEST_CASE("table cell formatting") {
  CHECK(format_cell(0.956, 0.944, 0.988) == "0.96 [0.94;0.99]");
  CHECK(format_cell(0.5, 0.0, 1.0) == "0.50 [0.00;1.00]");
}

TEST_CASE("report table and CSVs") {
  RocResult r;
  r.model_id = "HE_X40";
  r.cohort_id = "siteB";
  r.auroc = 0.81;
  r.ci_low = 0.7;
  r.ci_high = 0.9;
  r.n = 40;
  r.n_boot = 100;
  r.seed = 18446744073709551615ull;
  r.curve = {{0, 0}, {0.5, 1}, {1, 1}};
  const std::vector<RocResult> results{r};
  const std::vector<ReportRowSpec> rows{{"HE_X40", "H&E"}, {"MelanA_X5", "MelanA 5x"}};
  const std::vector<std::string> cohorts{"siteB", "siteC"};
  const std::string table = render_report_table(results, rows, cohorts);
  CHECK(table.find("0.81 [0.70;0.90]") != std::string::npos);
  CHECK(table.find("MelanA 5x") != std::string::npos);
  CHECK(table.find("siteC") != std::string::npos);

  std::stringstream ss;
  write_report_csv(ss, results);
  const auto back = read_report_csv(ss);
  REQUIRE(back.size() == 1);
  CHECK(back[0].auroc == 0.81);
  CHECK(back[0].seed == r.seed);
  CHECK(back[0].significant);

  std::stringstream roc;
  write_roc_points_csv(roc, results);
  std::string line;
  std::getline(roc, line);
  CHECK(line == kRocPointsHeader);
  int n = 0;
  while (std::getline(roc, line)) ++n;
  CHECK(n == 3);

  const auto c = cohort_of({{0.125, 0}, {0.75, 1}});
  std::stringstream cs;
  write_cohort_csv(cs, c);
  const auto cb = read_cohort_csv(cs, "x");
  CHECK(cb.cohort_id == "x");
  REQUIRE(cb.entries.size() == 2);
  CHECK(cb.entries[1].score == 0.75);
  CHECK(cb.entries[1].label == BinaryLabel::Melanoma);

  std::stringstream bad("slide_id,score,label\na,0.5\n");
  CHECK_THROWS_AS(read_cohort_csv(bad, "x"), ConfigError);
}
