#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "covsev/dataset.hpp"

namespace covsev {

struct FoldAssignment {
  int k = 5;
  std::uint64_t seed = 0;
  /// scan_id -> fold in [0, k).
  std::map<std::string, int> fold_of;
  /// Non-fatal notes, e.g. a class with fewer records than folds.
  std::vector<std::string> warnings;

  std::vector<std::string> members(int fold) const;
};

/// Stratified k-fold split. Per class the records are shuffled with a seeded
/// generator and dealt round-robin; the dealing position carries over between
/// classes so total fold sizes stay balanced too.
FoldAssignment stratified_kfold(std::span<const ScanRecord> records, int k, std::uint64_t seed);

/// Per-fold, per-class counts: result[fold][class].
std::vector<ClassCounts> fold_class_counts(const FoldAssignment& folds,
                                           std::span<const ScanRecord> records);

/// CSV `scan_id,fold`.
void write_fold_csv(const FoldAssignment& folds, const std::filesystem::path& path);
/// Reads a fold file and checks it partitions exactly `records`.
FoldAssignment read_fold_csv(const std::filesystem::path& path, std::span<const ScanRecord> records,
                             int k);

}  // namespace covsev
