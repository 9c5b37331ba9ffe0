#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "covsev/grid.hpp"

namespace covsev {

/// Sidecar metadata of a cached volume.
struct VolumeHeader {
  std::string scan_id;
  std::vector<std::int64_t> shape;  // always 4-D, CDHW
  std::string pipeline_config_hash;
};

/// Sidecar path for a payload: `x.f32` -> `x.json`.
std::filesystem::path sidecar_path(const std::filesystem::path& payload);

/// Writes raw f32le CDHW payload plus JSON sidecar, each via temp-then-rename.
/// Rank-3 volumes are stored with a leading channel of 1.
void write_volume_file(const std::filesystem::path& payload, const VolumeTensor& volume,
                       const std::string& scan_id, const std::string& config_hash);

/// Reads payload and sidecar. Throws IoError if missing and CacheError if the
/// files are inconsistent (size, layout, dtype).
std::pair<VolumeHeader, VolumeTensor> read_volume_file(const std::filesystem::path& payload);

enum class CacheStatus { Hit, Missing, Stale, Corrupt };

struct CacheLookup {
  CacheStatus status = CacheStatus::Missing;
  std::optional<VolumeTensor> volume;
  std::string detail;
};

/// Cache probe: Hit only when files are readable and the stored hash and
/// scan id match.
CacheLookup probe_volume_cache(const std::filesystem::path& payload, const std::string& scan_id,
                               const std::string& config_hash);

/// Drops a leading channel of extent 1: (1,D,H,W) -> (D,H,W).
VolumeTensor squeeze_channel(VolumeTensor volume);

/// Writes `text` to `path` atomically (temp file in the same directory, then rename).
void write_file_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace covsev
