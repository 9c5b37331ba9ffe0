#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "covsev/evaluate.hpp"

namespace fs = std::filesystem;
using namespace covsev;

namespace {

// Independent oracle: per-class TP/FP/FN by direct counting.
double brute_force_macro_f1(const std::vector<int>& t, const std::vector<int>& p) {
  double sum = 0.0;
  for (int c = 0; c < 4; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (p[i] == c && t[i] == c) tp += 1;
      if (p[i] == c && t[i] != c) fp += 1;
      if (p[i] != c && t[i] == c) fn += 1;
    }
    // F1 = 2TP / (2TP + FP + FN); 0 when the denominator vanishes.
    const double den = 2 * tp + fp + fn;
    sum += den == 0 ? 0.0 : 2 * tp / den;
  }
  return 100.0 * sum / 4.0;
}

ProbMatrix random_probs(std::mt19937& rng, std::size_t n) {
  std::gamma_distribution<double> g(0.7, 1.0);
  ProbMatrix m(n);
  for (auto& row : m) {
    double s = 0;
    for (auto& v : row) s += (v = g(rng) + 1e-12);
    for (auto& v : row) v /= s;
  }
  return m;
}

}  // namespace

TEST(MacroF1, PerfectPrediction) {
  std::vector<int> y{0, 1, 2, 3, 3, 1};
  EXPECT_DOUBLE_EQ(macro_f1(y, y), 100.0);
}

TEST(MacroF1, WorkedExample) {
  std::vector<int> t{0, 0, 1, 2, 3}, p{0, 1, 1, 2, 3};
  const auto scores = per_class_scores(confusion_matrix(t, p));
  EXPECT_NEAR(scores[0].f1, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(scores[1].f1, 2.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(scores[2].f1, 1.0);
  EXPECT_DOUBLE_EQ(scores[3].f1, 1.0);
  EXPECT_DOUBLE_EQ(round2(macro_f1(t, p)), 83.33);
  EXPECT_NEAR(macro_f1(t, p), brute_force_macro_f1(t, p), 1e-9);
}

TEST(MacroF1, AbsentClassCountsAsZero) {
  std::vector<int> y{0, 1, 2, 0};
  EXPECT_DOUBLE_EQ(macro_f1(y, y), 75.0);
}

TEST(MacroF1, Errors) {
  std::vector<int> a{0, 1}, b{0};
  EXPECT_THROW(macro_f1(a, b), std::invalid_argument);
  std::vector<int> c{0, 4};
  EXPECT_THROW(macro_f1(c, a), std::invalid_argument);
  EXPECT_THROW(macro_f1(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
  std::vector<int> neg{-1, 0};
  EXPECT_THROW(macro_f1(a, neg), std::invalid_argument);
}

TEST(MacroF1, MatchesBruteForceOracleOnRandomInstances) {
  std::mt19937 rng(2023);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 200)(rng);
    // Restrict the alphabet on some trials so classes go missing.
    const int hi = std::uniform_int_distribution<int>(0, 3)(rng);
    std::uniform_int_distribution<int> cls(0, hi);
    std::vector<int> t(n), p(n);
    for (auto& v : t) v = cls(rng);
    for (auto& v : p) v = std::uniform_int_distribution<int>(0, 3)(rng) == 0 ? cls(rng) : std::uniform_int_distribution<int>(0, 3)(rng);
    const double got = macro_f1(t, p);
    ASSERT_LT(std::abs(got - brute_force_macro_f1(t, p)), 1e-9);
    ASSERT_GE(got, 0.0);
    ASSERT_LE(got, 100.0);
  }
}

TEST(MacroF1, InvariantUnderRelabeling) {
  std::mt19937 rng(4);
  std::array<int, 4> perm{0, 1, 2, 3};
  for (int trial = 0; trial < 200; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> t(50), p(50);
    for (auto& v : t) v = static_cast<int>(rng() % 4);
    for (auto& v : p) v = static_cast<int>(rng() % 4);
    std::vector<int> tp, pp;
    for (int v : t) tp.push_back(perm[static_cast<std::size_t>(v)]);
    for (int v : p) pp.push_back(perm[static_cast<std::size_t>(v)]);
    ASSERT_NEAR(macro_f1(t, p), macro_f1(tp, pp), 1e-9);
  }
}

TEST(MacroF1, HundredOnlyWhenExact) {
  std::mt19937 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> t{0, 1, 2, 3};
    for (int i = 0; i < 20; ++i) t.push_back(static_cast<int>(rng() % 4));
    auto p = t;
    p[rng() % p.size()] = static_cast<int>(rng() % 4);
    const bool same = p == t;
    ASSERT_EQ(macro_f1(t, p) == 100.0, same);
  }
}

TEST(Softmax, UniformAndMonotone) {
  auto p = softmax(std::vector<double>{0, 0, 0, 0});
  for (double v : p) EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_EQ(argmax(softmax(std::vector<double>{10, 0, 0, 0})), 0);
  auto big = softmax(std::vector<double>{1000, -1000, 3, 2});
  EXPECT_NEAR(big[0] + big[1] + big[2] + big[3], 1.0, 1e-12);
}

TEST(Argmax, TiesGoLow) {
  EXPECT_EQ(argmax({0.25, 0.25, 0.25, 0.25}), 0);
  EXPECT_EQ(argmax({0.1, 0.4, 0.4, 0.1}), 1);
}

TEST(Ensemble, Examples) {
  ProbMatrix a{{0.1, 0.2, 0.3, 0.4}, {0.7, 0.1, 0.1, 0.1}};
  std::vector<ProbMatrix> same{a, a};
  EXPECT_EQ(ensemble_probs(same), a);
  std::vector<ProbMatrix> two{{{1, 0, 0, 0}}, {{0, 1, 0, 0}}};
  EXPECT_EQ(ensemble_probs(two)[0], (ProbVector{0.5, 0.5, 0, 0}));
  std::vector<ProbMatrix> bad{a, ProbMatrix{a[0]}};
  EXPECT_THROW(ensemble_probs(bad), std::invalid_argument);
  EXPECT_THROW(ensemble_probs(std::vector<ProbMatrix>{}), std::invalid_argument);
}

TEST(Ensemble, WeightsAndVoting) {
  std::vector<ProbMatrix> sets{{{1, 0, 0, 0}}, {{0, 1, 0, 0}}, {{0, 0.6, 0.4, 0}}};
  std::vector<double> w{3, 1, 0};
  auto out = ensemble_probs(sets, w);
  EXPECT_DOUBLE_EQ(out[0][0], 0.75);
  EXPECT_DOUBLE_EQ(out[0][1], 0.25);
  auto votes = ensemble_probs(sets, {}, EnsembleRule::MajorityVote);
  EXPECT_EQ(argmax(votes[0]), 1);
  EXPECT_NEAR(votes[0][1], 2.0 / 3.0, 1e-12);
}

TEST(Ensemble, RandomizedInvariants) {
  std::mt19937 rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 10)(rng);
    std::vector<ProbMatrix> sets;
    for (std::size_t m = 0; m < k; ++m) sets.push_back(random_probs(rng, n));
    auto out = ensemble_probs(sets);
    for (const auto& row : out) ASSERT_NEAR(row[0] + row[1] + row[2] + row[3], 1.0, 1e-6);

    auto shuffled = sets;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    ASSERT_EQ(ensemble_probs(shuffled), out);

    std::vector<ProbMatrix> copies(k, sets[0]);
    ASSERT_EQ(ensemble_probs(copies), sets[0]);

    // Agreement: force a shared argmax on row 0.
    const int cls = static_cast<int>(rng() % 4);
    for (auto& s : sets) {
      auto& row = s[0];
      std::swap(row[static_cast<std::size_t>(cls)], row[static_cast<std::size_t>(argmax(row))]);
      // Break exact ties in favour of cls.
      for (std::size_t c = 0; c < 4; ++c)
        if (static_cast<int>(c) != cls && row[c] == row[static_cast<std::size_t>(cls)]) row[c] *= 0.5;
      double sum = row[0] + row[1] + row[2] + row[3];
      for (auto& v : row) v /= sum;
      ASSERT_EQ(argmax(row), cls);
    }
    ASSERT_EQ(argmax(ensemble_probs(sets)[0]), cls);
  }
}

TEST(Report, PerfectPredictionsDiagonal) {
  std::vector<int> y{0, 1, 2, 3};
  ProbMatrix p{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
  auto r = make_report(y, p, {"train-val", "2B-InceptResnet", "h"});
  EXPECT_DOUBLE_EQ(r.macro_f1, 100.0);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(r.confusion[a][b], a == b ? 1 : 0);
}

TEST(Report, MacroMatchesMetricOnRandomInputs) {
  std::mt19937 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 60)(rng);
    auto p = random_probs(rng, n);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng() % 4);
    auto r = make_report(y, p, {"s", "m", "h"});
    ASSERT_LT(std::abs(r.macro_f1 - brute_force_macro_f1(y, argmax_rows(p))), 1e-9);
    double mean = 0;
    for (const auto& s : r.per_class) mean += s.f1;
    ASSERT_NEAR(r.macro_f1, 25.0 * mean, 1e-9);
  }
}

TEST(Report, JsonSchemaAndRounding) {
  std::vector<int> t{0, 0, 1, 2, 3};
  ProbMatrix p{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
  auto r = make_report(t, p, {"fold-1", "3D-DeCoVNet", "cafe"});
  auto j = nlohmann::json::parse(report_to_json(r));
  EXPECT_EQ(j["scenario"], "fold-1");
  EXPECT_EQ(j["model"], "3D-DeCoVNet");
  EXPECT_EQ(j["config_hash"], "cafe");
  EXPECT_EQ(j["confusion"].size(), 4u);
  EXPECT_EQ(j["confusion"][0][1], 1);
  ASSERT_EQ(j["per_class"].size(), 4u);
  EXPECT_TRUE(j["per_class"][0].contains("precision"));
  EXPECT_DOUBLE_EQ(j["macro_f1"].get<double>(), 83.33);
  auto back = report_from_json(report_to_json(r));
  EXPECT_EQ(back.confusion, r.confusion);
  EXPECT_EQ(back.n, 5);
}

TEST(Report, ComparisonTableMirrorsFoldLayout) {
  std::vector<MetricsReport> reports;
  const std::vector<std::string> models{"3D-DeCoVNet", "2B-InceptResnet", "Ensemble"};
  std::vector<std::string> scen;
  for (int f = 1; f <= 5; ++f) scen.push_back("fold" + std::to_string(f));
  for (const auto& m : models)
    for (int f = 1; f <= 5; ++f) {
      MetricsReport r;
      r.model = m;
      r.scenario = "fold" + std::to_string(f);
      r.macro_f1 = 60.0 + f + 1.0 / 3.0;
      reports.push_back(r);
    }
  auto path = fs::temp_directory_path() / "covsev_table.csv";
  write_comparison_table(reports, models, scen, path);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "model,fold1,fold2,fold3,fold4,fold5");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5);
  }
  EXPECT_EQ(rows, 3);
}

TEST(Probabilities, CsvRoundTripIsBitExact) {
  std::mt19937 rng(3);
  ScanProbabilities t;
  for (int i = 0; i < 30; ++i) {
    t.scan_ids.push_back("s" + std::to_string(i));
    t.labels.push_back(i % 5 == 0 ? std::nullopt : std::optional(severity_from_index(i % 4)));
  }
  t.probs = random_probs(rng, 30);
  auto path = fs::temp_directory_path() / "covsev_probs.csv";
  write_probabilities_csv(t, path);
  auto back = read_probabilities_csv(path);
  EXPECT_EQ(back.scan_ids, t.scan_ids);
  EXPECT_EQ(back.labels, t.labels);
  EXPECT_EQ(back.probs, t.probs);
}

TEST(Probabilities, TablesAlignedById) {
  ScanProbabilities a, b;
  a.scan_ids = {"x", "y"};
  a.labels = {Severity::Mild, Severity::Severe};
  a.probs = {{1, 0, 0, 0}, {0, 0, 1, 0}};
  b.scan_ids = {"y", "x"};
  b.labels = {Severity::Severe, Severity::Mild};
  b.probs = {{0, 0, 0, 1}, {0, 1, 0, 0}};
  std::vector<ScanProbabilities> both{a, b};
  auto e = ensemble_tables(both);
  EXPECT_EQ(e.scan_ids, a.scan_ids);
  EXPECT_EQ(e.probs[0], (ProbVector{0.5, 0.5, 0, 0}));
  EXPECT_EQ(e.probs[1], (ProbVector{0, 0, 0.5, 0.5}));
  b.scan_ids = {"y", "z"};
  std::vector<ScanProbabilities> mismatch{a, b};
  EXPECT_THROW(ensemble_tables(mismatch), std::invalid_argument);
}
