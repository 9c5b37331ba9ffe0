#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "covsev/dataset.hpp"
#include "covsev/grid.hpp"

namespace covsev {

/// Maps (slice, slice index) to the probability that the slice shows lung.
using SlicePredictor = std::function<double(const Image2D&, std::size_t)>;

struct SliceFilterModel {
  SlicePredictor predictor;
  double threshold = 0.5;
  std::size_t min_keep = 8;
};

/// Maps (slice, slice index) to binary lung and infection masks.
using SegmentPredictor = std::function<MaskPair(const Image2D&, std::size_t)>;

struct Segmenter {
  SegmentPredictor predictor;
};

/// Ascending indices of slices whose probability reaches the threshold. When
/// fewer than min_keep qualify, the min_keep most probable slices are kept
/// (ties go to the lower index). Never empty for a non-empty scan.
std::vector<std::size_t> filter_slices(const ScanRecord& scan, const SliceFilterModel& model);

/// Same selection rule applied to precomputed probabilities.
std::vector<std::size_t> select_slices(std::span<const double> probabilities, double threshold,
                                       std::size_t min_keep);

/// Fraction of pixels in kLungIntensityBand inside the central 80% crop.
double heuristic_lung_filter(const Image2D& slice);

/// Filter predictor reading lung presence from the scan's ground-truth masks.
SlicePredictor oracle_slice_predictor(const ScanRecord& scan);
SlicePredictor heuristic_slice_predictor();

/// Segmenter returning the scan's ground-truth masks.
Segmenter oracle_segmenter(const ScanRecord& scan);

/// One mask pair per kept slice; infection is intersected with lung.
std::vector<MaskPair> segment_scan(const ScanRecord& scan, std::span<const std::size_t> kept,
                                   const Segmenter& segmenter);

/// Trilinear resampling of a slice stack to (depth, height, width), with
/// grid-aligned corners. Output is clamped to [0,1].
VolumeTensor pack_volume(std::span<const Image2D> slices, std::array<std::int64_t, 3> target);

/// Nearest-neighbor resampling for masks; output stays binary.
VolumeTensor pack_mask_volume(std::span<const Mask2D> masks, std::array<std::int64_t, 3> target);

enum class MaskMode { MaskedIntensity, BinaryMask };
MaskMode mask_mode_from_string(std::string_view name);
std::string_view to_string(MaskMode mode);

struct PackingConfig {
  /// Depths packed for each branch and concatenated along depth. The default
  /// gives lungs 32 and infection 16.
  std::vector<std::int64_t> lung_depths{32};
  std::vector<std::int64_t> infection_depths{16};
  std::int64_t size2d = 299;
  std::int64_t depth3d = 64;
  std::int64_t size3d = 224;
  MaskMode mask_mode = MaskMode::MaskedIntensity;
};

struct TwoBranchSample {
  VolumeTensor lungs;      // (sum lung_depths, size2d, size2d)
  VolumeTensor infection;  // (sum infection_depths, size2d, size2d)
  std::optional<Severity> label;
};

struct VoxelSample3D {
  VolumeTensor volume;  // (2, depth3d, size3d, size3d); channel 0 lung, 1 infection
  std::optional<Severity> label;
};

/// Slices of `kept` multiplied by (or replaced with) the chosen masks.
std::vector<Image2D> apply_masks(const ScanRecord& scan, std::span<const std::size_t> kept,
                                 std::span<const MaskPair> masks, bool infection, MaskMode mode);

TwoBranchSample build_two_branch_sample(const ScanRecord& scan, std::span<const std::size_t> kept,
                                        std::span<const MaskPair> masks,
                                        const PackingConfig& config = {});

VoxelSample3D build_voxel_sample(const ScanRecord& scan, std::span<const std::size_t> kept,
                                 std::span<const MaskPair> masks,
                                 const PackingConfig& config = {});

}  // namespace covsev
