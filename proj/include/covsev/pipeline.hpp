#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "covsev/arch2d.hpp"
#include "covsev/arch3d.hpp"
#include "covsev/dataset.hpp"
#include "covsev/evaluate.hpp"
#include "covsev/folds.hpp"
#include "covsev/preprocess.hpp"
#include "covsev/samples.hpp"
#include "covsev/schedule.hpp"
#include "covsev/stage_models.hpp"

namespace covsev {

enum class Scenario { TrainVal, CV5 };
std::string to_string(Scenario s);
Scenario scenario_from_string(std::string_view text);

enum class FilterKind { Model, Heuristic, Oracle };
enum class SegmenterKind { Model, Oracle };
std::string to_string(FilterKind k);
std::string to_string(SegmenterKind k);
FilterKind filter_kind_from_string(std::string_view text);
SegmenterKind segmenter_kind_from_string(std::string_view text);

struct PreprocessOptions {
  FilterKind filter = FilterKind::Heuristic;
  /// The heuristic reports a pixel fraction, so its useful cut is small.
  double threshold = 0.02;
  std::size_t min_keep = 8;
  SegmenterKind segmenter = SegmenterKind::Oracle;
  PackingConfig packing;
  StageModelConfig stage;
};

enum class Arch { TwoD, ThreeD };
std::string to_string(Arch a);
Arch arch_from_string(std::string_view text);

struct PipelineConfig {
  std::filesystem::path manifest;
  std::filesystem::path work_dir;
  /// Default to work_dir/{cache,checkpoints,reports}.
  std::filesystem::path cache_dir, checkpoint_dir, report_dir;

  PreprocessOptions preprocess;
  TwoBranchConfig arch2d;
  HybridDeCoVNetConfig arch3d;
  TrainConfig train2d = TrainConfig::reference_2d();
  TrainConfig train3d = TrainConfig::reference_3d();
  Scenario scenario = Scenario::TrainVal;
  std::uint64_t seed = 0;
  int folds = 5;
  /// Evaluate the best-val checkpoint (true) or the final-epoch one.
  bool select_best = true;
  int threads = 1;

  /// Parses TOML; relative paths resolve against `base_dir`.
  static PipelineConfig from_toml(std::string_view text, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& toml_path);

  /// Copies the global seed and packing geometry into the sub-configs and
  /// fills default directories. Call after changing fields by hand.
  void finalize();
  void validate() const;

  /// Everything that affects results; paths are left out.
  nlohmann::json to_json() const;
  /// Stamp of the preprocessing subset; keys the volume caches.
  std::string preprocess_hash() const;
};

/// Config hash stamped into checkpoints and reports: the config JSON plus the
/// manifest's (scan_id, label, split) rows, each extended with the scan's
/// source fingerprint when `fingerprints` has one.
std::string config_hash(const PipelineConfig& config, const DatasetManifest& manifest,
                        const std::map<std::string, std::string>& fingerprints = {});

/// Display name used in reports and tables.
std::string model_name(const PipelineConfig& config, Arch arch);
inline constexpr const char* kEnsembleName = "Ensemble";

/// One train/evaluate split: "train-val", or "fold<i>" inside cv5.
struct EvalUnit {
  std::string name;
  /// Relative artifact directory, e.g. "train-val" or "cv5/fold1".
  std::filesystem::path rel;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
};

struct PreparedScan {
  TensorSample two_d;
  TensorSample three_d;
};

struct RunSummary {
  std::string config_hash;
  std::vector<std::filesystem::path> reports;
  std::filesystem::path table;
};

/// Exclusive ownership of a work directory via an O_EXCL lock file.
class WorkDirLock {
 public:
  explicit WorkDirLock(const std::filesystem::path& dir);
  ~WorkDirLock();
  WorkDirLock(const WorkDirLock&) = delete;
  WorkDirLock& operator=(const WorkDirLock&) = delete;

 private:
  std::filesystem::path path_;
};

class Pipeline {
 public:
  Pipeline(PipelineConfig config, std::ostream& log);

  const PipelineConfig& config() const { return config_; }
  const std::string& hash() const { return hash_; }
  const DatasetManifest& manifest() const { return manifest_; }

  /// Builds or reuses the cached samples of every labeled scan.
  const std::map<std::string, PreparedScan>& prepare();

  std::vector<EvalUnit> units();

  /// Trains `arch` on the unit unless a checkpoint with this config hash exists.
  void train(const EvalUnit& unit, Arch arch);
  /// Scores the unit's validation scans; writes probabilities and a report.
  MetricsReport evaluate(const EvalUnit& unit, Arch arch);
  /// Averages the 2D and 3D probability files of the unit.
  MetricsReport ensemble(const EvalUnit& unit);

  /// Full scenario: prepare, then train/evaluate/ensemble every unit; cv5
  /// also writes out-of-fold reports. Writes the comparison table.
  RunSummary run();

  std::filesystem::path checkpoint_path(const EvalUnit& unit, Arch arch, bool best) const;
  std::filesystem::path probs_path(const std::filesystem::path& rel, const std::string& key) const;
  std::filesystem::path report_path(const std::filesystem::path& rel, const std::string& key) const;

 private:
  PipelineConfig config_;
  std::ostream& log_;
  DatasetManifest manifest_;
  std::string hash_;
  std::map<std::string, std::string> fingerprints_;
  std::unique_ptr<WorkDirLock> lock_;
  std::map<std::string, PreparedScan> prepared_;
  std::optional<SliceFilterModel> filter_model_;
  std::optional<Segmenter> segmenter_model_;

  void ensure_stage_models();
  PreparedScan prepare_scan(const ScanRecord& record);
  std::vector<TensorSample> gather(const std::vector<std::string>& ids, Arch arch);
  MetricsReport write_outputs(const std::filesystem::path& rel, const std::string& key, const std::string& scenario,
                              const std::string& model, const ScanProbabilities& table);
};

/// Probability file plus `<stem>.json` recording its config hash and model.
void write_probability_artifact(const ScanProbabilities& table, const std::filesystem::path& path,
                                const std::string& config_hash, const std::string& model,
                                const std::string& scenario);
/// Reads a probability file; throws ContractError when `expected_hash` is
/// given and differs from the recorded one.
ScanProbabilities read_probability_artifact(const std::filesystem::path& path,
                                            const std::optional<std::string>& expected_hash,
                                            std::string* recorded_hash = nullptr);

}  // namespace covsev
