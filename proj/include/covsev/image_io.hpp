#pragma once

#include <cstdint>
#include <filesystem>

#include "covsev/grid.hpp"

namespace covsev {

/// 8-bit grayscale PNG. Color inputs are converted to gray by libpng.
Grid2D<std::uint8_t> read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const Grid2D<std::uint8_t>& image);

/// Quantizes [0,1] intensities to 0..255 (round to nearest).
Grid2D<std::uint8_t> to_u8(const Image2D& image);
/// Binary mask to 0/255.
Grid2D<std::uint8_t> mask_to_u8(const Mask2D& mask);
/// Nonzero pixels become 1.
Mask2D mask_from_u8(const Grid2D<std::uint8_t>& image);

}  // namespace covsev
