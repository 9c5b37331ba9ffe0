#include "covsev/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "covsev/errors.hpp"
#include "covsev/hash.hpp"
#include "covsev/image_io.hpp"
#include "covsev/volume.hpp"

namespace fs = std::filesystem;

namespace covsev {

Severity severity_from_value(int value) {
  if (value < 1 || value > 4) {
    throw std::out_of_range("severity must be in 1..4, got " + std::to_string(value));
  }
  return static_cast<Severity>(value);
}

Severity severity_from_index(int index) { return severity_from_value(index + 1); }

std::string_view severity_name(Severity s) {
  switch (s) {
    case Severity::Mild: return "mild";
    case Severity::Moderate: return "moderate";
    case Severity::Severe: return "severe";
    case Severity::Critical: return "critical";
  }
  return "unknown";
}

std::string shape_string(std::span<const std::int64_t> shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

void DatasetManifest::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    if (r.scan_id.empty()) throw ManifestError("manifest: empty scan_id");
    if (!seen.insert(r.scan_id).second) {
      throw ManifestError("manifest: duplicate scan_id '" + r.scan_id + "'");
    }
  }
}

std::vector<ScanRecord> DatasetManifest::with_split(std::string_view split) const {
  std::vector<ScanRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

std::vector<ScanRecord> DatasetManifest::labeled() const {
  std::vector<ScanRecord> out;
  for (const auto& r : records) {
    if (r.label) out.push_back(r);
  }
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());

  DatasetManifest manifest;
  manifest.source_path = path;
  const fs::path base = path.parent_path();

  std::string line;
  if (!std::getline(in, line)) throw ParseError("manifest " + path.string() + ": empty file", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  auto header = split_csv_line(line);
  for (auto& h : header) h = trim(h);
  const std::vector<std::string> expected{"scan_id", "path", "severity", "split"};
  if (header != expected) {
    throw ParseError("manifest " + path.string() + ": header must be scan_id,path,severity,split", 1);
  }

  std::unordered_set<std::string> seen;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != 4) {
      throw ParseError("manifest row " + std::to_string(row) + ": expected 4 columns, got " +
                           std::to_string(cells.size()),
                       row);
    }
    for (auto& c : cells) c = trim(c);

    ScanRecord rec;
    rec.scan_id = cells[0];
    if (rec.scan_id.empty()) throw ParseError("manifest row " + std::to_string(row) + ": empty scan_id", row);
    if (!seen.insert(rec.scan_id).second) {
      throw ManifestError("manifest row " + std::to_string(row) + ": duplicate scan_id '" +
                          rec.scan_id + "'");
    }
    fs::path p = cells[1];
    rec.source = p.is_absolute() || p.empty() ? p : base / p;
    if (!cells[2].empty()) {
      int value = 0;
      std::size_t used = 0;
      try {
        value = std::stoi(cells[2], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cells[2].size() || value < 1 || value > 4) {
        throw ParseError("manifest row " + std::to_string(row) + ": severity '" + cells[2] +
                             "' is not in {1,2,3,4}",
                         row);
      }
      rec.label = severity_from_value(value);
    }
    rec.split = cells[3];
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  manifest.validate();
  const fs::path base = fs::absolute(path).parent_path();
  std::ostringstream out;
  out << "scan_id,path,severity,split\n";
  for (const auto& r : manifest.records) {
    std::string p;
    if (!r.source.empty()) {
      std::error_code ec;
      auto rel = fs::relative(fs::absolute(r.source), base, ec);
      p = (ec || rel.empty()) ? r.source.string() : rel.generic_string();
    }
    out << r.scan_id << ',' << p << ',';
    if (r.label) out << severity_value(*r.label);
    out << ',' << r.split << '\n';
  }
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  write_file_atomic(path, out.str());
}

Image2D normalize_min_max(const Grid2D<std::uint8_t>& raw) {
  Image2D out(raw.height, raw.width);
  if (raw.empty()) return out;
  auto [mn, mx] = std::minmax_element(raw.data.begin(), raw.data.end());
  const float lo = *mn;
  const float hi = *mx;
  if (hi == lo) return out;
  const float scale = hi - lo;
  for (std::size_t i = 0; i < raw.size(); ++i) out.data[i] = (static_cast<float>(raw.data[i]) - lo) / scale;
  return out;
}

void normalize_min_max_inplace(Image2D& slice) {
  if (slice.empty()) return;
  auto [mn, mx] = std::minmax_element(slice.data.begin(), slice.data.end());
  const float lo = *mn;
  const float hi = *mx;
  if (hi == lo) {
    std::fill(slice.data.begin(), slice.data.end(), 0.0f);
    return;
  }
  for (auto& v : slice.data) v = (v - lo) / (hi - lo);
}

namespace {

std::vector<fs::path> sorted_pngs(const fs::path& dir, std::string_view prefix = {}) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext != ".png") continue;
    if (!prefix.empty() && entry.path().filename().string().rfind(prefix, 0) != 0) continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  return files;
}

}  // namespace

ScanRecord load_scan(const ScanRecord& record) {
  if (record.loaded()) return record;
  ScanRecord out = record;
  const fs::path& src = record.source;
  if (src.empty()) throw IoError("scan '" + record.scan_id + "' has no source path");
  if (!fs::exists(src)) throw IoError("scan '" + record.scan_id + "': missing " + src.string());

  if (fs::is_directory(src)) {
    auto files = sorted_pngs(src);
    if (files.empty()) throw IoError("scan '" + record.scan_id + "': no PNG slices in " + src.string());
    for (const auto& f : files) {
      out.slices.push_back(normalize_min_max(read_png_gray(f)));
      if (!out.slices.back().same_shape(out.slices.front())) {
        throw ShapeError("scan '" + record.scan_id + "': slice " + f.filename().string() +
                         " differs in size from the first slice");
      }
    }
    const fs::path mask_dir = src / "masks";
    auto lungs = sorted_pngs(mask_dir, "lung_");
    auto infections = sorted_pngs(mask_dir, "infection_");
    if (!lungs.empty() || !infections.empty()) {
      if (lungs.size() != out.slices.size() || infections.size() != out.slices.size()) {
        throw IoError("scan '" + record.scan_id + "': mask count does not match slice count");
      }
      for (std::size_t i = 0; i < lungs.size(); ++i) {
        MaskPair pair{mask_from_u8(read_png_gray(lungs[i])), mask_from_u8(read_png_gray(infections[i]))};
        if (!pair.lung.same_shape(out.slices[i]) || !pair.infection.same_shape(out.slices[i])) {
          throw ShapeError("scan '" + record.scan_id + "': mask " + std::to_string(i) + " has wrong size");
        }
        out.ground_truth_masks.push_back(std::move(pair));
      }
    }
  } else {
    // Single-file volume container: channel 0 of a CDHW payload.
    auto [header, vol] = read_volume_file(src);
    const auto& s = header.shape;
    const std::int64_t plane = s[2] * s[3];
    for (std::int64_t d = 0; d < s[1]; ++d) {
      Image2D slice(s[2], s[3]);
      std::copy_n(vol.values.begin() + d * plane, plane, slice.data.begin());
      normalize_min_max_inplace(slice);
      out.slices.push_back(std::move(slice));
    }
    if (out.slices.empty()) throw IoError("scan '" + record.scan_id + "': empty volume container");
  }
  return out;
}

ClassCounts class_distribution(std::span<const ScanRecord> records) {
  ClassCounts counts{};
  for (const auto& r : records) {
    if (!r.label) throw std::invalid_argument("class_distribution: scan '" + r.scan_id + "' is unlabeled");
    ++counts[static_cast<std::size_t>(class_index(*r.label))];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

constexpr float kBodyLow = 0.72f;
constexpr float kBodyHigh = 0.9f;
constexpr float kLungLow = 0.08f;
constexpr float kLungHigh = 0.34f;
constexpr float kInfectionLow = 0.42f;
constexpr float kInfectionHigh = 0.58f;

float quantize(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f; }

bool inside_ellipse(double y, double x, double cy, double cx, double ry, double rx) {
  const double dy = (y - cy) / ry;
  const double dx = (x - cx) / rx;
  return dy * dy + dx * dx <= 1.0;
}

struct Blob {
  double z, y, x, sigma, amplitude;
};

ScanRecord synthesize_scan(std::string scan_id, Severity label, std::uint64_t seed, int index,
                           ScanDims dims) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(class_index(label)), static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<float> noise(0.0f, 0.025f);

  const std::int64_t S = dims.slices, H = dims.height, W = dims.width;
  const double jitter = 0.92 + 0.16 * unit(rng);
  const double shift_y = (unit(rng) - 0.5) * 0.03 * static_cast<double>(H);
  const double shift_x = (unit(rng) - 0.5) * 0.03 * static_cast<double>(W);
  const auto margin = static_cast<std::int64_t>(std::floor(0.15 * static_cast<double>(S)));
  const std::int64_t z0 = margin;
  const std::int64_t z1 = S - 1 - margin;

  ScanRecord rec;
  rec.scan_id = std::move(scan_id);
  rec.label = label;
  rec.slices.reserve(static_cast<std::size_t>(S));
  rec.ground_truth_masks.reserve(static_cast<std::size_t>(S));

  const double body_cy = 0.5 * static_cast<double>(H), body_cx = 0.5 * static_cast<double>(W);
  const double body_ry = 0.42 * static_cast<double>(H), body_rx = 0.45 * static_cast<double>(W);
  const double vert_cy = 0.82 * static_cast<double>(H), vert_cx = 0.5 * static_cast<double>(W);
  const double vert_r = std::max(1.0, 0.04 * static_cast<double>(std::min(H, W)));

  std::int64_t lung_total = 0;
  for (std::int64_t z = 0; z < S; ++z) {
    Image2D slice(H, W);
    MaskPair masks{Mask2D(H, W), Mask2D(H, W)};
    double scale = 0.0;
    if (z >= z0 && z <= z1) {
      const double t = static_cast<double>(z - z0 + 1) / static_cast<double>(z1 - z0 + 2);
      scale = (0.6 + 0.4 * std::sin(std::numbers::pi * t)) * jitter;
    }
    const double lung_cy = 0.42 * static_cast<double>(H) + shift_y;
    const double ry = 0.25 * static_cast<double>(H) * scale;
    const double rx = 0.13 * static_cast<double>(W) * scale;
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
        float v = 0.0f;
        if (inside_ellipse(py, px, body_cy, body_cx, body_ry, body_rx)) {
          v = std::clamp(0.8f + noise(rng), kBodyLow, kBodyHigh);
          if (scale > 0.0 &&
              (inside_ellipse(py, px, lung_cy, 0.30 * static_cast<double>(W) + shift_x, ry, rx) ||
               inside_ellipse(py, px, lung_cy, 0.70 * static_cast<double>(W) + shift_x, ry, rx))) {
            masks.lung.at(y, x) = 1;
            ++lung_total;
            v = std::clamp(0.2f + noise(rng), kLungLow, kLungHigh);
          }
          if (inside_ellipse(py, px, vert_cy, vert_cx, vert_r, vert_r)) v = 1.0f;
        }
        slice.at(y, x) = quantize(v);
      }
    }
    // Fixed anchors so that per-slice min-max normalization is the identity.
    slice.at(0, 0) = 0.0f;
    slice.at(static_cast<std::int64_t>(vert_cy) < H ? static_cast<std::int64_t>(vert_cy) : H - 1,
             static_cast<std::int64_t>(vert_cx)) = 1.0f;
    rec.slices.push_back(std::move(slice));
    rec.ground_truth_masks.push_back(std::move(masks));
  }

  if (lung_total > 0) {
    const auto band = kSeverityBands[static_cast<std::size_t>(class_index(label))];
    // Central half of the band keeps neighbouring classes apart.
    const double width = band.high - band.low;
    const double target = band.low + width * (0.25 + 0.5 * unit(rng));
    auto k = static_cast<std::int64_t>(std::llround(target * static_cast<double>(lung_total)));
    k = std::clamp<std::int64_t>(k, 1, lung_total);

    // Smooth random field over lung voxels; infection = top-k voxels.
    std::vector<std::array<std::int64_t, 3>> lung_voxels;
    lung_voxels.reserve(static_cast<std::size_t>(lung_total));
    for (std::int64_t z = 0; z < S; ++z) {
      const auto& m = rec.ground_truth_masks[static_cast<std::size_t>(z)].lung;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
          if (m.at(y, x)) lung_voxels.push_back({z, y, x});
    }
    std::uniform_int_distribution<std::size_t> pick(0, lung_voxels.size() - 1);
    const int n_blobs = 3 + static_cast<int>(unit(rng) * 4.0);
    std::vector<Blob> blobs;
    const double extent = static_cast<double>(std::max({S, H, W}));
    for (int b = 0; b < n_blobs; ++b) {
      const auto& c = lung_voxels[pick(rng)];
      blobs.push_back({static_cast<double>(c[0]), static_cast<double>(c[1]), static_cast<double>(c[2]),
                       extent * (0.06 + 0.1 * unit(rng)), 0.5 + unit(rng)});
    }
    std::vector<std::pair<double, std::size_t>> score(lung_voxels.size());
    for (std::size_t i = 0; i < lung_voxels.size(); ++i) {
      const auto& v = lung_voxels[i];
      double f = 0.0;
      for (const auto& bl : blobs) {
        const double dz = (static_cast<double>(v[0]) - bl.z) * static_cast<double>(H) / static_cast<double>(S);
        const double dy = static_cast<double>(v[1]) - bl.y;
        const double dx = static_cast<double>(v[2]) - bl.x;
        f += bl.amplitude * std::exp(-(dz * dz + dy * dy + dx * dx) / (2.0 * bl.sigma * bl.sigma));
      }
      score[i] = {f, i};
    }
    std::partial_sort(score.begin(), score.begin() + k, score.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::int64_t j = 0; j < k; ++j) {
      const auto& v = lung_voxels[score[static_cast<std::size_t>(j)].second];
      rec.ground_truth_masks[static_cast<std::size_t>(v[0])].infection.at(v[1], v[2]) = 1;
      rec.slices[static_cast<std::size_t>(v[0])].at(v[1], v[2]) =
          quantize(std::clamp(0.5f + noise(rng), kInfectionLow, kInfectionHigh));
    }
  }
  return rec;
}

}  // namespace

std::string source_fingerprint(const ScanRecord& record) {
  namespace fs = std::filesystem;
  const auto& src = record.source;
  std::error_code ec;
  if (fs::is_regular_file(src, ec)) return content_hash(read_text_file(src));
  if (!fs::is_directory(src, ec)) throw IoError("scan " + record.scan_id + ": source not found: " + src.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(src))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), src));
  std::sort(files.begin(), files.end());
  std::string text;
  for (const auto& f : files) {
    const auto bytes = read_text_file(src / f);
    text += f.generic_string() + "\n" + std::to_string(bytes.size()) + "\n" + bytes;
  }
  return content_hash(text);
}

DatasetManifest generate_synthetic_dataset(int n_per_class, std::uint64_t seed, ScanDims dims,
                                           std::string_view id_prefix, std::string_view split) {
  if (n_per_class < 1) throw std::invalid_argument("generate_synthetic_dataset: n_per_class must be >= 1");
  if (dims.slices < 8 || dims.height < 8 || dims.width < 8) {
    throw std::invalid_argument("generate_synthetic_dataset: dims must each be >= 8, got (" +
                                std::to_string(dims.slices) + ", " + std::to_string(dims.height) + ", " +
                                std::to_string(dims.width) + ")");
  }
  DatasetManifest manifest;
  for (int c = 0; c < kNumClasses; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      char id[64];
      std::snprintf(id, sizeof id, "_c%d_%03d", c + 1, i);
      auto rec = synthesize_scan(std::string(id_prefix) + id, severity_from_index(c), seed, i, dims);
      rec.split = std::string(split);
      manifest.records.push_back(std::move(rec));
    }
  }
  return manifest;
}

DatasetManifest write_scan_directories(const DatasetManifest& manifest, const fs::path& root) {
  manifest.validate();
  DatasetManifest out;
  out.source_path = root / "manifest.csv";
  for (const auto& rec : manifest.records) {
    if (!rec.loaded()) throw std::invalid_argument("write_scan_directories: record '" + rec.scan_id + "' not loaded");
    const fs::path dir = root / rec.scan_id;
    fs::create_directories(dir / "masks");
    char name[64];
    for (std::size_t i = 0; i < rec.slices.size(); ++i) {
      std::snprintf(name, sizeof name, "slice_%04zu.png", i);
      write_png_gray(dir / name, to_u8(rec.slices[i]));
    }
    for (std::size_t i = 0; i < rec.ground_truth_masks.size(); ++i) {
      std::snprintf(name, sizeof name, "lung_%04zu.png", i);
      write_png_gray(dir / "masks" / name, mask_to_u8(rec.ground_truth_masks[i].lung));
      std::snprintf(name, sizeof name, "infection_%04zu.png", i);
      write_png_gray(dir / "masks" / name, mask_to_u8(rec.ground_truth_masks[i].infection));
    }
    ScanRecord ref;
    ref.scan_id = rec.scan_id;
    ref.source = dir;
    ref.label = rec.label;
    ref.split = rec.split;
    out.records.push_back(std::move(ref));
  }
  return out;
}

double infection_fraction(const ScanRecord& record) {
  std::int64_t lung = 0, infection = 0;
  for (const auto& m : record.ground_truth_masks) {
    for (auto v : m.lung.data) lung += v != 0;
    for (auto v : m.infection.data) infection += v != 0;
  }
  if (lung == 0) return 0.0;
  return static_cast<double>(infection) / static_cast<double>(lung);
}

}  // namespace covsev
