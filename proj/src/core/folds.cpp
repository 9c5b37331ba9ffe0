#include "covsev/folds.hpp"

#include <algorithm>
#include <random>
#include <sstream>
#include <unordered_map>

#include "covsev/errors.hpp"
#include "covsev/volume.hpp"

namespace covsev {

std::vector<std::string> FoldAssignment::members(int fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : fold_of) {
    if (f == fold) out.push_back(id);
  }
  return out;
}

FoldAssignment stratified_kfold(std::span<const ScanRecord> records, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("stratified_kfold: k must be >= 2");
  FoldAssignment out;
  out.k = k;
  out.seed = seed;

  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.label) throw std::invalid_argument("stratified_kfold: scan '" + r.scan_id + "' is unlabeled");
    by_class[static_cast<std::size_t>(class_index(*r.label))].push_back(i);
  }
  for (int c = 0; c < kNumClasses; ++c) {
    if (by_class[static_cast<std::size_t>(c)].empty()) {
      throw std::invalid_argument("stratified_kfold: class " + std::string(severity_name(severity_from_index(c))) +
                                  " has no records");
    }
  }

  std::size_t position = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    auto members = by_class[static_cast<std::size_t>(c)];
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(c), 0x5eedu};
    std::mt19937_64 rng(seq);
    for (std::size_t i = members.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(members[i - 1], members[pick(rng)]);
    }
    if (members.size() < static_cast<std::size_t>(k)) {
      out.warnings.push_back("class " + std::string(severity_name(severity_from_index(c))) + " has " +
                             std::to_string(members.size()) + " records for " + std::to_string(k) +
                             " folds; some folds lack it");
    }
    for (auto idx : members) {
      const auto& id = records[idx].scan_id;
      if (!out.fold_of.emplace(id, static_cast<int>(position % static_cast<std::size_t>(k))).second) {
        throw ManifestError("stratified_kfold: duplicate scan_id '" + id + "'");
      }
      ++position;
    }
  }
  return out;
}

std::vector<ClassCounts> fold_class_counts(const FoldAssignment& folds, std::span<const ScanRecord> records) {
  std::vector<ClassCounts> counts(static_cast<std::size_t>(folds.k), ClassCounts{});
  for (const auto& r : records) {
    auto it = folds.fold_of.find(r.scan_id);
    if (it == folds.fold_of.end() || !r.label) continue;
    ++counts[static_cast<std::size_t>(it->second)][static_cast<std::size_t>(class_index(*r.label))];
  }
  return counts;
}

void write_fold_csv(const FoldAssignment& folds, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "scan_id,fold\n";
  for (const auto& [id, f] : folds.fold_of) out << id << ',' << f << '\n';
  write_file_atomic(path, out.str());
}

FoldAssignment read_fold_csv(const std::filesystem::path& path, std::span<const ScanRecord> records, int k) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "scan_id,fold") throw ParseError("fold file " + path.string() + ": bad header", 1);
  FoldAssignment out;
  out.k = k;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    auto comma = line.rfind(',');
    if (comma == std::string::npos) throw ParseError("fold file: malformed row " + std::to_string(row), row);
    int fold = -1;
    try {
      fold = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
    }
    if (fold < 0 || fold >= k) throw ParseError("fold file: fold out of range on row " + std::to_string(row), row);
    if (!out.fold_of.emplace(line.substr(0, comma), fold).second) {
      throw ManifestError("fold file: scan '" + line.substr(0, comma) + "' assigned twice");
    }
  }
  std::size_t matched = 0;
  for (const auto& r : records) {
    if (!r.label) continue;
    if (!out.fold_of.contains(r.scan_id)) {
      throw ManifestError("fold file " + path.string() + " does not assign scan '" + r.scan_id + "'");
    }
    ++matched;
  }
  if (matched != out.fold_of.size()) {
    throw ManifestError("fold file " + path.string() + " assigns scans not in the manifest");
  }
  return out;
}

}  // namespace covsev
