#include "covsev/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "covsev/errors.hpp"

namespace covsev {

std::vector<std::size_t> select_slices(std::span<const double> probabilities, double threshold,
                                       std::size_t min_keep) {
  const std::size_t n = probabilities.size();
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n; ++i) {
    if (probabilities[i] >= threshold) kept.push_back(i);
  }
  const std::size_t floor_count = std::max<std::size_t>(1, std::min(min_keep, n));
  if (n > 0 && kept.size() < floor_count) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probabilities[a] > probabilities[b]; });
    kept.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(floor_count));
    std::sort(kept.begin(), kept.end());
  }
  return kept;
}

std::vector<std::size_t> filter_slices(const ScanRecord& scan, const SliceFilterModel& model) {
  if (scan.slices.empty()) throw std::invalid_argument("filter_slices: scan '" + scan.scan_id + "' has no slices");
  if (!model.predictor) throw std::invalid_argument("filter_slices: no predictor");
  std::vector<double> probs(scan.slices.size());
  for (std::size_t i = 0; i < scan.slices.size(); ++i) {
    double p;
    try {
      p = model.predictor(scan.slices[i], i);
    } catch (const std::exception& e) {
      throw ContractError("slice filter failed on scan '" + scan.scan_id + "' slice " + std::to_string(i) +
                          ": " + e.what());
    }
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ContractError("slice filter returned " + std::to_string(p) + " outside [0,1] on scan '" +
                          scan.scan_id + "' slice " + std::to_string(i));
    }
    probs[i] = p;
  }
  return select_slices(probs, model.threshold, model.min_keep);
}

double heuristic_lung_filter(const Image2D& slice) {
  if (slice.empty()) return 0.0;
  const auto y0 = static_cast<std::int64_t>(std::lround(0.1 * static_cast<double>(slice.height)));
  const auto x0 = static_cast<std::int64_t>(std::lround(0.1 * static_cast<double>(slice.width)));
  const std::int64_t y1 = slice.height - y0, x1 = slice.width - x0;
  std::int64_t in_band = 0;
  for (std::int64_t y = y0; y < y1; ++y) {
    for (std::int64_t x = x0; x < x1; ++x) {
      const float v = slice.at(y, x);
      in_band += v >= kLungIntensityBand.low && v <= kLungIntensityBand.high;
    }
  }
  const auto area = (y1 - y0) * (x1 - x0);
  if (area <= 0) return 0.0;
  return std::clamp(static_cast<double>(in_band) / static_cast<double>(area), 0.0, 1.0);
}

SlicePredictor heuristic_slice_predictor() {
  return [](const Image2D& slice, std::size_t) { return heuristic_lung_filter(slice); };
}

SlicePredictor oracle_slice_predictor(const ScanRecord& scan) {
  if (scan.ground_truth_masks.size() != scan.slices.size()) {
    throw std::invalid_argument("oracle filter: scan '" + scan.scan_id + "' has no ground-truth masks");
  }
  std::vector<double> present;
  for (const auto& m : scan.ground_truth_masks) {
    present.push_back(std::any_of(m.lung.data.begin(), m.lung.data.end(), [](auto v) { return v != 0; }) ? 1.0
                                                                                                         : 0.0);
  }
  return [present = std::move(present)](const Image2D&, std::size_t i) { return present.at(i); };
}

Segmenter oracle_segmenter(const ScanRecord& scan) {
  if (scan.ground_truth_masks.size() != scan.slices.size()) {
    throw std::invalid_argument("oracle segmenter: scan '" + scan.scan_id + "' has no ground-truth masks");
  }
  auto masks = scan.ground_truth_masks;
  return Segmenter{[masks = std::move(masks)](const Image2D&, std::size_t i) { return masks.at(i); }};
}

std::vector<MaskPair> segment_scan(const ScanRecord& scan, std::span<const std::size_t> kept,
                                   const Segmenter& segmenter) {
  if (!segmenter.predictor) throw std::invalid_argument("segment_scan: no predictor");
  std::vector<MaskPair> out;
  out.reserve(kept.size());
  for (auto idx : kept) {
    if (idx >= scan.slices.size()) {
      throw std::out_of_range("segment_scan: slice index " + std::to_string(idx) + " out of range for scan '" +
                              scan.scan_id + "'");
    }
    const auto& slice = scan.slices[idx];
    MaskPair pair = segmenter.predictor(slice, idx);
    if (!pair.lung.same_shape(slice) || !pair.infection.same_shape(slice)) {
      throw ContractError("segmenter returned masks of wrong size for scan '" + scan.scan_id + "' slice " +
                          std::to_string(idx) + ": expected " + std::to_string(slice.height) + "x" +
                          std::to_string(slice.width));
    }
    auto is_binary = [](const Mask2D& m) {
      return std::all_of(m.data.begin(), m.data.end(), [](auto v) { return v <= 1; });
    };
    if (!is_binary(pair.lung) || !is_binary(pair.infection)) {
      throw ContractError("segmenter returned non-binary masks for scan '" + scan.scan_id + "' slice " +
                          std::to_string(idx));
    }
    for (std::size_t i = 0; i < pair.infection.size(); ++i) pair.infection.data[i] &= pair.lung.data[i];
    out.push_back(std::move(pair));
  }
  return out;
}

namespace {

struct AxisTap {
  std::int64_t i0;
  std::int64_t i1;
  float w;
};

std::vector<AxisTap> linear_taps(std::int64_t in, std::int64_t out) {
  std::vector<AxisTap> taps(static_cast<std::size_t>(out));
  for (std::int64_t i = 0; i < out; ++i) {
    double src = 0.0;
    if (out > 1) {
      src = static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    } else {
      src = 0.5 * static_cast<double>(in - 1);
    }
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    i0 = std::clamp<std::int64_t>(i0, 0, in - 1);
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {i0, i1, static_cast<float>(src - static_cast<double>(i0))};
  }
  return taps;
}

std::vector<std::int64_t> nearest_taps(std::int64_t in, std::int64_t out) {
  std::vector<std::int64_t> taps(static_cast<std::size_t>(out));
  for (std::int64_t i = 0; i < out; ++i) {
    double src = out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1)
                         : 0.5 * static_cast<double>(in - 1);
    taps[static_cast<std::size_t>(i)] = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::floor(src + 0.5)), 0, in - 1);
  }
  return taps;
}

inline float lerp_exact(float a, float b, float w) { return a + w * (b - a); }

void check_target(std::array<std::int64_t, 3> target) {
  for (auto t : target) {
    if (t < 1) throw std::invalid_argument("pack_volume: target dims must be >= 1, got " + shape_string(target));
  }
}

}  // namespace

VolumeTensor pack_volume(std::span<const Image2D> slices, std::array<std::int64_t, 3> target) {
  if (slices.empty()) throw std::invalid_argument("pack_volume: empty slice list");
  check_target(target);
  const std::int64_t D = static_cast<std::int64_t>(slices.size());
  const std::int64_t H = slices.front().height, W = slices.front().width;
  for (const auto& s : slices) {
    if (s.height != H || s.width != W) throw ShapeError("pack_volume: slices differ in size");
  }
  if (H < 1 || W < 1) throw std::invalid_argument("pack_volume: empty slices");
  const auto [OD, OH, OW] = target;

  // Trilinear interpolation factorizes into three 1-D passes: W, then H, then D.
  const auto tw = linear_taps(W, OW);
  std::vector<float> pass_w(static_cast<std::size_t>(D * H * OW));
  for (std::int64_t d = 0; d < D; ++d) {
    const auto& src = slices[static_cast<std::size_t>(d)].data;
    for (std::int64_t y = 0; y < H; ++y) {
      const float* row = src.data() + y * W;
      float* dst = pass_w.data() + (d * H + y) * OW;
      for (std::int64_t x = 0; x < OW; ++x) {
        const auto& t = tw[static_cast<std::size_t>(x)];
        dst[x] = lerp_exact(row[t.i0], row[t.i1], t.w);
      }
    }
  }

  const auto th = linear_taps(H, OH);
  std::vector<float> pass_h(static_cast<std::size_t>(D * OH * OW));
  for (std::int64_t d = 0; d < D; ++d) {
    for (std::int64_t y = 0; y < OH; ++y) {
      const auto& t = th[static_cast<std::size_t>(y)];
      const float* r0 = pass_w.data() + (d * H + t.i0) * OW;
      const float* r1 = pass_w.data() + (d * H + t.i1) * OW;
      float* dst = pass_h.data() + (d * OH + y) * OW;
      for (std::int64_t x = 0; x < OW; ++x) dst[x] = lerp_exact(r0[x], r1[x], t.w);
    }
  }

  const auto td = linear_taps(D, OD);
  VolumeTensor out({OD, OH, OW});
  const std::int64_t plane = OH * OW;
  for (std::int64_t d = 0; d < OD; ++d) {
    const auto& t = td[static_cast<std::size_t>(d)];
    const float* p0 = pass_h.data() + t.i0 * plane;
    const float* p1 = pass_h.data() + t.i1 * plane;
    float* dst = out.values.data() + d * plane;
    for (std::int64_t i = 0; i < plane; ++i) dst[i] = std::clamp(lerp_exact(p0[i], p1[i], t.w), 0.0f, 1.0f);
  }
  return out;
}

VolumeTensor pack_mask_volume(std::span<const Mask2D> masks, std::array<std::int64_t, 3> target) {
  if (masks.empty()) throw std::invalid_argument("pack_mask_volume: empty mask list");
  check_target(target);
  const std::int64_t D = static_cast<std::int64_t>(masks.size());
  const std::int64_t H = masks.front().height, W = masks.front().width;
  for (const auto& m : masks) {
    if (m.height != H || m.width != W) throw ShapeError("pack_mask_volume: masks differ in size");
  }
  const auto [OD, OH, OW] = target;
  const auto td = nearest_taps(D, OD), th = nearest_taps(H, OH), tw = nearest_taps(W, OW);
  VolumeTensor out({OD, OH, OW});
  std::size_t o = 0;
  for (std::int64_t d = 0; d < OD; ++d) {
    const auto& m = masks[static_cast<std::size_t>(td[static_cast<std::size_t>(d)])];
    for (std::int64_t y = 0; y < OH; ++y) {
      for (std::int64_t x = 0; x < OW; ++x) {
        out.values[o++] = m.at(th[static_cast<std::size_t>(y)], tw[static_cast<std::size_t>(x)]) ? 1.0f : 0.0f;
      }
    }
  }
  return out;
}

MaskMode mask_mode_from_string(std::string_view name) {
  if (name == "masked-intensity") return MaskMode::MaskedIntensity;
  if (name == "binary-mask") return MaskMode::BinaryMask;
  throw std::invalid_argument("unknown mask mode '" + std::string(name) + "'");
}

std::string_view to_string(MaskMode mode) {
  return mode == MaskMode::MaskedIntensity ? "masked-intensity" : "binary-mask";
}

std::vector<Image2D> apply_masks(const ScanRecord& scan, std::span<const std::size_t> kept,
                                 std::span<const MaskPair> masks, bool infection, MaskMode mode) {
  if (kept.size() != masks.size()) {
    throw std::invalid_argument("apply_masks: " + std::to_string(masks.size()) + " mask pairs for " +
                                std::to_string(kept.size()) + " kept slices");
  }
  std::vector<Image2D> out;
  out.reserve(kept.size());
  for (std::size_t j = 0; j < kept.size(); ++j) {
    const auto& slice = scan.slices.at(kept[j]);
    const Mask2D& m = infection ? masks[j].infection : masks[j].lung;
    if (!m.same_shape(slice)) throw ShapeError("apply_masks: mask/slice size mismatch");
    Image2D img(slice.height, slice.width);
    for (std::size_t i = 0; i < img.size(); ++i) {
      img.data[i] = m.data[i] ? (mode == MaskMode::MaskedIntensity ? slice.data[i] : 1.0f) : 0.0f;
    }
    out.push_back(std::move(img));
  }
  return out;
}

namespace {

VolumeTensor pack_views(std::span<const Image2D> stack, std::span<const std::int64_t> depths, std::int64_t size) {
  if (depths.empty()) throw std::invalid_argument("packing needs at least one depth");
  VolumeTensor out;
  std::int64_t total = 0;
  for (auto d : depths) {
    auto v = pack_volume(stack, {d, size, size});
    out.values.insert(out.values.end(), v.values.begin(), v.values.end());
    total += d;
  }
  out.shape = {total, size, size};
  return out;
}

}  // namespace

TwoBranchSample build_two_branch_sample(const ScanRecord& scan, std::span<const std::size_t> kept,
                                        std::span<const MaskPair> masks, const PackingConfig& config) {
  TwoBranchSample sample;
  sample.lungs = pack_views(apply_masks(scan, kept, masks, false, config.mask_mode), config.lung_depths,
                            config.size2d);
  sample.infection = pack_views(apply_masks(scan, kept, masks, true, config.mask_mode), config.infection_depths,
                                config.size2d);
  sample.label = scan.label;
  return sample;
}

VoxelSample3D build_voxel_sample(const ScanRecord& scan, std::span<const std::size_t> kept,
                                 std::span<const MaskPair> masks, const PackingConfig& config) {
  const std::array<std::int64_t, 3> target{config.depth3d, config.size3d, config.size3d};
  auto lung = pack_volume(apply_masks(scan, kept, masks, false, config.mask_mode), target);
  auto inf = pack_volume(apply_masks(scan, kept, masks, true, config.mask_mode), target);
  VoxelSample3D sample;
  sample.volume.shape = {2, target[0], target[1], target[2]};
  sample.volume.values = std::move(lung.values);
  sample.volume.values.insert(sample.volume.values.end(), inf.values.begin(), inf.values.end());
  sample.label = scan.label;
  return sample;
}

}  // namespace covsev
