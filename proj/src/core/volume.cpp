#include "covsev/volume.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "covsev/errors.hpp"
#include "covsev/hash.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace covsev {

namespace {

fs::path temp_sibling(const fs::path& path) {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  return path.parent_path() / ("." + path.filename().string() + ".tmp" + std::to_string(rng() % 1000000007));
}

void write_bytes_atomic(const fs::path& path, const char* data, std::size_t size) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(data, static_cast<std::streamsize>(size));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

}  // namespace

void write_file_atomic(const fs::path& path, std::string_view text) {
  write_bytes_atomic(path, text.data(), text.size());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path sidecar_path(const fs::path& payload) {
  fs::path p = payload;
  p.replace_extension(".json");
  return p;
}

void write_volume_file(const fs::path& payload, const VolumeTensor& volume, const std::string& scan_id,
                       const std::string& config_hash) {
  std::vector<std::int64_t> shape = volume.shape;
  if (shape.size() == 3) shape.insert(shape.begin(), 1);
  if (shape.size() != 4) throw ShapeError("volume file needs rank 3 or 4, got " + shape_string(volume.shape));
  if (VolumeTensor::numel_of(shape) != static_cast<std::int64_t>(volume.values.size())) {
    throw ShapeError("volume values do not match shape " + shape_string(shape));
  }

  std::string bytes(volume.values.size() * sizeof(float), '\0');
  for (std::size_t i = 0; i < volume.values.size(); ++i) {
    std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(volume.values[i]));
    std::memcpy(bytes.data() + i * 4, &bits, 4);
  }
  write_bytes_atomic(payload, bytes.data(), bytes.size());

  json meta{{"scan_id", scan_id},
            {"shape", shape},
            {"layout", "CDHW"},
            {"dtype", "f32le"},
            {"pipeline_config_hash", config_hash},
            {"payload_hash", content_hash(bytes)}};
  write_file_atomic(sidecar_path(payload), meta.dump(2) + "\n");
}

std::pair<VolumeHeader, VolumeTensor> read_volume_file(const fs::path& payload) {
  const fs::path side = sidecar_path(payload);
  if (!fs::exists(payload)) throw IoError("missing volume payload " + payload.string());
  if (!fs::exists(side)) throw IoError("missing volume sidecar " + side.string());

  VolumeHeader header;
  std::string payload_hash;
  try {
    auto meta = json::parse(read_text_file(side));
    if (meta.at("layout").get<std::string>() != "CDHW") throw CacheError("unsupported layout");
    if (meta.at("dtype").get<std::string>() != "f32le") throw CacheError("unsupported dtype");
    header.scan_id = meta.at("scan_id").get<std::string>();
    header.shape = meta.at("shape").get<std::vector<std::int64_t>>();
    header.pipeline_config_hash = meta.at("pipeline_config_hash").get<std::string>();
    payload_hash = meta.at("payload_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw CacheError("malformed sidecar " + side.string() + ": " + e.what());
  }
  if (header.shape.size() != 4) throw CacheError("sidecar " + side.string() + ": shape must be 4-D");

  const std::string bytes = read_text_file(payload);
  const auto n = VolumeTensor::numel_of(header.shape);
  if (static_cast<std::int64_t>(bytes.size()) != n * 4) {
    throw CacheError("payload " + payload.string() + " has " + std::to_string(bytes.size()) +
                     " bytes, expected " + std::to_string(n * 4));
  }
  if (content_hash(bytes) != payload_hash) throw CacheError("payload " + payload.string() + " fails its checksum");
  VolumeTensor vol;
  vol.shape = header.shape;
  vol.values.resize(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < vol.values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + i * 4, 4);
    vol.values[i] = std::bit_cast<float>(to_le(bits));
  }
  return {std::move(header), std::move(vol)};
}

CacheLookup probe_volume_cache(const fs::path& payload, const std::string& scan_id, const std::string& config_hash) {
  CacheLookup out;
  if (!fs::exists(payload) && !fs::exists(sidecar_path(payload))) return out;
  try {
    auto [header, vol] = read_volume_file(payload);
    if (header.scan_id != scan_id || header.pipeline_config_hash != config_hash) {
      out.status = CacheStatus::Stale;
      out.detail = "cache " + payload.string() + " was written for scan '" + header.scan_id + "' hash " +
                   header.pipeline_config_hash;
      return out;
    }
    out.status = CacheStatus::Hit;
    out.volume = std::move(vol);
  } catch (const std::exception& e) {
    out.status = CacheStatus::Corrupt;
    out.detail = e.what();
  }
  return out;
}

VolumeTensor squeeze_channel(VolumeTensor volume) {
  if (volume.shape.size() == 4 && volume.shape[0] == 1) volume.shape.erase(volume.shape.begin());
  return volume;
}

}  // namespace covsev
