#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace covsev {

/// Dense row-major 2D array.
template <typename T>
struct Grid2D {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<T> data;

  Grid2D() = default;
  Grid2D(std::int64_t h, std::int64_t w, T fill = T{})
      : height(h), width(w), data(static_cast<std::size_t>(h * w), fill) {
    if (h < 0 || w < 0) throw std::invalid_argument("Grid2D: negative extent");
  }

  T& at(std::int64_t y, std::int64_t x) { return data[static_cast<std::size_t>(y * width + x)]; }
  const T& at(std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>(y * width + x)];
  }
  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }

  template <typename U>
  bool same_shape(const Grid2D<U>& other) const noexcept {
    return height == other.height && width == other.width;
  }

  friend bool operator==(const Grid2D&, const Grid2D&) = default;
};

/// Intensity slice, values normally in [0, 1].
using Image2D = Grid2D<float>;
/// Binary mask; every entry is 0 or 1.
using Mask2D = Grid2D<std::uint8_t>;

/// Dense float array in C-order. Rank 3 is (D, H, W); rank 4 is (C, D, H, W).
struct VolumeTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  VolumeTensor() = default;
  explicit VolumeTensor(std::vector<std::int64_t> s, float fill = 0.0f) : shape(std::move(s)) {
    values.assign(static_cast<std::size_t>(numel_of(shape)), fill);
  }

  static std::int64_t numel_of(std::span<const std::int64_t> s) {
    std::int64_t n = 1;
    for (auto d : s) {
      if (d < 0) throw std::invalid_argument("VolumeTensor: negative extent");
      n *= d;
    }
    return n;
  }
  std::int64_t numel() const { return numel_of(shape); }
  std::size_t rank() const noexcept { return shape.size(); }

  friend bool operator==(const VolumeTensor&, const VolumeTensor&) = default;
};

std::string shape_string(std::span<const std::int64_t> shape);

}  // namespace covsev
