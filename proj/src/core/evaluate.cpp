#include "covsev/evaluate.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include <json.hpp>

#include "covsev/errors.hpp"
#include "covsev/schedule.hpp"
#include "covsev/volume.hpp"

using json = nlohmann::json;

namespace covsev {

namespace {

void check_labels(std::span<const int> labels, const char* what) {
  for (int v : labels) {
    if (v < 0 || v >= kNumClasses) {
      throw std::invalid_argument(std::string(what) + " contains class " + std::to_string(v) + " outside 0..3");
    }
  }
}

double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace

ConfusionMatrix confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred) {
  if (y_true.size() != y_pred.size()) {
    throw std::invalid_argument("length mismatch: " + std::to_string(y_true.size()) + " labels vs " +
                                std::to_string(y_pred.size()) + " predictions");
  }
  check_labels(y_true, "y_true");
  check_labels(y_pred, "y_pred");
  ConfusionMatrix cm{};
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    ++cm[static_cast<std::size_t>(y_true[i])][static_cast<std::size_t>(y_pred[i])];
  }
  return cm;
}

std::array<ClassScores, kNumClasses> per_class_scores(const ConfusionMatrix& cm) {
  std::array<ClassScores, kNumClasses> out{};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const double tp = static_cast<double>(cm[c][c]);
    double predicted = 0.0, actual = 0.0;
    for (std::size_t j = 0; j < kNumClasses; ++j) {
      predicted += static_cast<double>(cm[j][c]);
      actual += static_cast<double>(cm[c][j]);
    }
    auto& s = out[c];
    s.precision = safe_ratio(tp, predicted);
    s.recall = safe_ratio(tp, actual);
    s.f1 = safe_ratio(2.0 * s.precision * s.recall, s.precision + s.recall);
  }
  return out;
}

namespace {

double macro_from_scores(const std::array<ClassScores, kNumClasses>& scores) {
  double sum = 0.0;
  for (const auto& s : scores) sum += s.f1;
  return 100.0 * sum / kNumClasses;
}

}  // namespace

double macro_f1(std::span<const int> y_true, std::span<const int> y_pred) {
  if (y_true.empty()) throw std::invalid_argument("macro_f1: empty input");
  return macro_from_scores(per_class_scores(confusion_matrix(y_true, y_pred)));
}

int argmax(const ProbVector& row) {
  int best = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    if (row[static_cast<std::size_t>(c)] > row[static_cast<std::size_t>(best)]) best = c;
  }
  return best;
}

std::vector<int> argmax_rows(std::span<const ProbVector> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(argmax(r));
  return out;
}

ProbVector softmax(std::span<const double> logits) {
  if (logits.size() != kNumClasses) throw std::invalid_argument("softmax: expected 4 logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  ProbVector p{};
  double sum = 0.0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    p[c] = std::exp(logits[c] - mx);
    sum += p[c];
  }
  for (auto& v : p) v /= sum;
  return p;
}

ProbMatrix ensemble_probs(std::span<const ProbMatrix> prob_sets, std::span<const double> weights, EnsembleRule rule) {
  if (prob_sets.empty()) throw std::invalid_argument("ensemble_probs: no probability matrices");
  const std::size_t n = prob_sets.front().size();
  for (std::size_t m = 0; m < prob_sets.size(); ++m) {
    if (prob_sets[m].size() != n) {
      throw std::invalid_argument("ensemble_probs: matrix " + std::to_string(m) + " has " +
                                  std::to_string(prob_sets[m].size()) + " rows, expected " + std::to_string(n));
    }
  }
  std::vector<double> w(prob_sets.size(), 1.0);
  if (!weights.empty()) {
    if (weights.size() != prob_sets.size()) throw std::invalid_argument("ensemble_probs: one weight per matrix");
    for (double x : weights) {
      if (!(x >= 0.0)) throw std::invalid_argument("ensemble_probs: weights must be nonnegative");
    }
    w.assign(weights.begin(), weights.end());
  }
  double total = 0.0;
  for (double x : w) total += x;
  if (!(total > 0.0)) throw std::invalid_argument("ensemble_probs: weights sum to zero");

  ProbMatrix out(n, ProbVector{});
  // Contributions are sorted per entry, so the input list order is irrelevant.
  std::vector<std::pair<double, double>> terms(prob_sets.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      for (std::size_t m = 0; m < prob_sets.size(); ++m) {
        double v = rule == EnsembleRule::Mean ? prob_sets[m][i][c]
                                              : (argmax(prob_sets[m][i]) == static_cast<int>(c) ? 1.0 : 0.0);
        terms[m] = {v, w[m]};
      }
      std::sort(terms.begin(), terms.end());
      // Running mean: K identical inputs reproduce the input exactly.
      double mean = 0.0, seen = 0.0;
      for (const auto& [v, wt] : terms) {
        if (wt == 0.0) continue;
        seen += wt;
        mean += (v - mean) * (wt / seen);
      }
      out[i][c] = mean;
    }
  }
  return out;
}

MetricsReport make_report(std::span<const int> y_true, std::span<const ProbVector> prob_rows, const ReportTags& tags) {
  if (y_true.size() != prob_rows.size()) {
    throw std::invalid_argument("make_report: " + std::to_string(y_true.size()) + " labels vs " +
                                std::to_string(prob_rows.size()) + " probability rows");
  }
  const auto pred = argmax_rows(prob_rows);
  MetricsReport r;
  r.scenario = tags.scenario;
  r.model = tags.model;
  r.config_hash = tags.config_hash;
  r.confusion = confusion_matrix(y_true, pred);
  r.per_class = per_class_scores(r.confusion);
  r.macro_f1 = y_true.empty() ? 0.0 : macro_from_scores(r.per_class);
  r.n = static_cast<std::int64_t>(y_true.size());
  return r;
}

double round2(double value) { return std::round(value * 100.0) / 100.0; }

namespace {

double round_score(double v) { return std::round(v * 1e4) / 1e4; }

}  // namespace

std::string report_to_json(const MetricsReport& r) {
  json per_class = json::array();
  for (const auto& s : r.per_class) {
    per_class.push_back({{"precision", round_score(s.precision)}, {"recall", round_score(s.recall)}, {"f1", round_score(s.f1)}});
  }
  json confusion = json::array();
  for (const auto& row : r.confusion) confusion.push_back(std::vector<std::int64_t>(row.begin(), row.end()));
  json j{{"scenario", r.scenario}, {"model", r.model},       {"config_hash", r.config_hash},
         {"confusion", confusion}, {"per_class", per_class}, {"macro_f1", round2(r.macro_f1)}};
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(std::string_view text) {
  MetricsReport r;
  try {
    auto j = json::parse(text);
    r.scenario = j.at("scenario").get<std::string>();
    r.model = j.at("model").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    const auto& cm = j.at("confusion");
    if (cm.size() != kNumClasses) throw std::invalid_argument("confusion must be 4x4");
    for (std::size_t a = 0; a < kNumClasses; ++a) {
      if (cm[a].size() != kNumClasses) throw std::invalid_argument("confusion must be 4x4");
      for (std::size_t b = 0; b < kNumClasses; ++b) {
        r.confusion[a][b] = cm[a][b].get<std::int64_t>();
        r.n += r.confusion[a][b];
      }
    }
    const auto& pc = j.at("per_class");
    if (pc.size() != kNumClasses) throw std::invalid_argument("per_class must have 4 entries");
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      r.per_class[c] = {pc[c].at("precision").get<double>(), pc[c].at("recall").get<double>(),
                        pc[c].at("f1").get<double>()};
    }
    r.macro_f1 = j.at("macro_f1").get<double>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: ") + e.what(), 0);
  }
  return r;
}

void write_report(const MetricsReport& report, const std::filesystem::path& path) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, report_to_json(report));
}

MetricsReport read_report(const std::filesystem::path& path) { return report_from_json(read_text_file(path)); }

void write_comparison_table(std::span<const MetricsReport> reports, std::span<const std::string> model_order,
                            std::span<const std::string> scenario_order, const std::filesystem::path& path) {
  std::map<std::pair<std::string, std::string>, double> cell;
  for (const auto& r : reports) cell[{r.model, r.scenario}] = r.macro_f1;
  std::ostringstream out;
  out << "model";
  for (const auto& s : scenario_order) out << ',' << s;
  out << '\n';
  char buf[32];
  for (const auto& m : model_order) {
    out << m;
    for (const auto& s : scenario_order) {
      out << ',';
      auto it = cell.find({m, s});
      if (it != cell.end()) {
        std::snprintf(buf, sizeof buf, "%.2f", round2(it->second));
        out << buf;
      }
    }
    out << '\n';
  }
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, out.str());
}

void write_probabilities_csv(const ScanProbabilities& t, const std::filesystem::path& path) {
  if (t.scan_ids.size() != t.probs.size() || t.labels.size() != t.probs.size()) {
    throw std::invalid_argument("write_probabilities_csv: column lengths differ");
  }
  std::ostringstream out;
  out << "scan_id,label,p_mild,p_moderate,p_severe,p_critical\n";
  for (std::size_t i = 0; i < t.probs.size(); ++i) {
    out << t.scan_ids[i] << ',';
    if (t.labels[i]) out << severity_value(*t.labels[i]);
    for (double p : t.probs[i]) out << ',' << format_double(p);
    out << '\n';
  }
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, out.str());
}

ScanProbabilities read_probabilities_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "scan_id,label,p_mild,p_moderate,p_severe,p_critical") {
    throw ParseError("probability file " + path.string() + ": bad header", 1);
  }
  ScanProbabilities t;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw ParseError("probability file: malformed row " + std::to_string(row), row);
    t.scan_ids.push_back(cells[0]);
    t.labels.push_back(cells[1].empty() ? std::nullopt : std::optional(severity_from_value(std::stoi(cells[1]))));
    ProbVector p{};
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const auto& s = cells[2 + c];
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), p[c]);
      if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw ParseError("probability file: bad number on row " + std::to_string(row), row);
      }
    }
    t.probs.push_back(p);
  }
  return t;
}

ScanProbabilities ensemble_tables(std::span<const ScanProbabilities> tables, EnsembleRule rule) {
  if (tables.empty()) throw std::invalid_argument("ensemble_tables: no tables");
  const auto& first = tables.front();
  std::vector<ProbMatrix> aligned;
  for (const auto& t : tables) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < t.scan_ids.size(); ++i) index[t.scan_ids[i]] = i;
    if (index.size() != first.scan_ids.size() || t.scan_ids.size() != first.scan_ids.size()) {
      throw std::invalid_argument("ensemble_tables: tables cover different scans");
    }
    ProbMatrix m;
    for (const auto& id : first.scan_ids) {
      auto it = index.find(id);
      if (it == index.end()) throw std::invalid_argument("ensemble_tables: scan '" + id + "' missing from a table");
      m.push_back(t.probs[it->second]);
    }
    aligned.push_back(std::move(m));
  }
  ScanProbabilities out;
  out.scan_ids = first.scan_ids;
  out.labels = first.labels;
  out.probs = ensemble_probs(aligned, {}, rule);
  return out;
}

std::vector<int> label_indices(const ScanProbabilities& table) {
  std::vector<int> y;
  for (std::size_t i = 0; i < table.labels.size(); ++i) {
    if (!table.labels[i]) throw std::invalid_argument("scan '" + table.scan_ids[i] + "' has no label");
    y.push_back(class_index(*table.labels[i]));
  }
  return y;
}

}  // namespace covsev
