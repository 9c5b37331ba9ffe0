#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "covsev/dataset.hpp"

namespace covsev {

using ProbVector = std::array<double, kNumClasses>;
using ProbMatrix = std::vector<ProbVector>;

/// rows = true class, columns = predicted class.
using ConfusionMatrix = std::array<std::array<std::int64_t, kNumClasses>, kNumClasses>;

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

ConfusionMatrix confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred);

/// Per-class scores with 0/0 -> 0.
std::array<ClassScores, kNumClasses> per_class_scores(const ConfusionMatrix& confusion);

/// Macro F1 over all four classes, as a percentage in [0, 100].
double macro_f1(std::span<const int> y_true, std::span<const int> y_pred);

/// Index of the largest entry; ties go to the lower index.
int argmax(const ProbVector& row);
std::vector<int> argmax_rows(std::span<const ProbVector> rows);

/// Numerically stable softmax in double precision.
ProbVector softmax(std::span<const double> logits);

enum class EnsembleRule { Mean, MajorityVote };

/// Row-wise weighted mean (uniform when `weights` is empty). MajorityVote
/// returns per-row vote shares, so argmax of the result is the vote winner
/// (ties to the lower class).
ProbMatrix ensemble_probs(std::span<const ProbMatrix> prob_sets, std::span<const double> weights = {},
                          EnsembleRule rule = EnsembleRule::Mean);

struct MetricsReport {
  std::string scenario;
  std::string model;
  std::string config_hash;
  ConfusionMatrix confusion{};
  std::array<ClassScores, kNumClasses> per_class{};
  /// Unrounded; rounding to 2 decimals happens at serialization.
  double macro_f1 = 0.0;
  std::int64_t n = 0;
};

struct ReportTags {
  std::string scenario;
  std::string model;
  std::string config_hash;
};

MetricsReport make_report(std::span<const int> y_true, std::span<const ProbVector> prob_rows,
                          const ReportTags& tags);

double round2(double value);

/// `{scenario, model, config_hash, confusion, per_class, macro_f1}`.
std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(std::string_view text);
void write_report(const MetricsReport& report, const std::filesystem::path& path);
MetricsReport read_report(const std::filesystem::path& path);

/// Wide comparison table: one row per model, one column per scenario tag
/// (e.g. train-val, or fold1..fold5 plus oof). Missing cells are empty.
void write_comparison_table(std::span<const MetricsReport> reports,
                            std::span<const std::string> model_order,
                            std::span<const std::string> scenario_order,
                            const std::filesystem::path& path);

/// Per-scan probabilities: `scan_id,label,p_mild,p_moderate,p_severe,p_critical`.
/// Label is the grade 1..4 or empty. Values are printed round-trip exact.
struct ScanProbabilities {
  std::vector<std::string> scan_ids;
  std::vector<std::optional<Severity>> labels;
  ProbMatrix probs;
};

void write_probabilities_csv(const ScanProbabilities& table, const std::filesystem::path& path);
ScanProbabilities read_probabilities_csv(const std::filesystem::path& path);

/// Aligns tables by scan id (order of the first) and averages them.
ScanProbabilities ensemble_tables(std::span<const ScanProbabilities> tables,
                                  EnsembleRule rule = EnsembleRule::Mean);

/// Labels as class indices; throws if any label is absent.
std::vector<int> label_indices(const ScanProbabilities& table);

}  // namespace covsev
