#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "covsev/grid.hpp"

namespace covsev {

inline constexpr int kNumClasses = 4;

/// Expert severity grade. The numeric value is the grade (1..4); the class
/// index used by models and metrics is value - 1.
enum class Severity : std::uint8_t { Mild = 1, Moderate = 2, Severe = 3, Critical = 4 };

Severity severity_from_value(int value);
Severity severity_from_index(int index);
inline int class_index(Severity s) { return static_cast<int>(s) - 1; }
inline int severity_value(Severity s) { return static_cast<int>(s); }
std::string_view severity_name(Severity s);

using ClassCounts = std::array<std::int64_t, kNumClasses>;

struct MaskPair {
  Mask2D lung;
  Mask2D infection;
};

/// One CT scan. `slices` is empty until the record is loaded (see load_scan);
/// `source` is a scan directory or a single-file volume container.
struct ScanRecord {
  std::string scan_id;
  std::filesystem::path source;
  std::vector<Image2D> slices;
  std::optional<Severity> label;
  std::string split;
  /// Per-slice ground truth, present for synthetic data only.
  std::vector<MaskPair> ground_truth_masks;

  bool loaded() const noexcept { return !slices.empty(); }
};

struct DatasetManifest {
  std::vector<ScanRecord> records;
  std::filesystem::path source_path;

  /// Throws ManifestError on duplicate ids.
  void validate() const;
  std::vector<ScanRecord> with_split(std::string_view split) const;
  std::vector<ScanRecord> labeled() const;
};

/// Parses `scan_id,path,severity,split`. Relative paths resolve against the
/// manifest's directory. Slice data is not read.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes the manifest CSV. Paths are written relative to `path`'s directory
/// when possible.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Returns a copy of `record` with slices (and ground-truth masks, when the
/// scan directory has them) loaded and min-max normalized. Already-loaded
/// records are returned unchanged.
ScanRecord load_scan(const ScanRecord& record);

/// Content hash of the record's source: the file bytes of a volume container,
/// or every file under a scan directory keyed by relative path. Independent of
/// where the data lives. Throws IoError when the source is missing.
std::string source_fingerprint(const ScanRecord& record);

/// Per-slice min-max normalization to [0,1]; a constant slice maps to zeros.
Image2D normalize_min_max(const Grid2D<std::uint8_t>& raw);
void normalize_min_max_inplace(Image2D& slice);

ClassCounts class_distribution(std::span<const ScanRecord> records);

// ---------------------------------------------------------------------------
// Synthetic CT generator

struct ScanDims {
  std::int64_t slices = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
};

struct FractionBand {
  double low;
  double high;
};

/// Infection-to-lung voxel fraction band for each class, mild..critical.
inline constexpr std::array<FractionBand, kNumClasses> kSeverityBands{{
    {0.01, 0.10},
    {0.10, 0.25},
    {0.25, 0.50},
    {0.50, 0.85},
}};

/// Intensity band used by the heuristic lung filter; synthetic lung and
/// infection tissue fall inside it, body tissue and air fall outside.
inline constexpr FractionBand kLungIntensityBand{0.05, 0.6};

/// Deterministic synthetic scans: 4 * n_per_class records ordered by class.
/// Every record is loaded and carries ground-truth masks. Intensities are
/// multiples of 1/255 so that PNG export round-trips exactly.
DatasetManifest generate_synthetic_dataset(int n_per_class, std::uint64_t seed, ScanDims dims,
                                           std::string_view id_prefix = "synth",
                                           std::string_view split = {});

/// Writes `<root>/<scan_id>/slice_####.png`, `<root>/<scan_id>/masks/...`
/// and returns a manifest whose records reference the written directories.
DatasetManifest write_scan_directories(const DatasetManifest& manifest,
                                       const std::filesystem::path& root);

/// Infection voxels / lung voxels from the record's ground-truth masks.
double infection_fraction(const ScanRecord& record);

}  // namespace covsev
