#include "covsev/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "covsev/errors.hpp"

namespace covsev {

Grid2D<std::uint8_t> read_png_gray(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  Grid2D<std::uint8_t> out(image.height, image.width);
  if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

void write_png_gray(const std::filesystem::path& path, const Grid2D<std::uint8_t>& img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.data.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

Grid2D<std::uint8_t> to_u8(const Image2D& image) {
  Grid2D<std::uint8_t> out(image.height, image.width);
  std::transform(image.data.begin(), image.data.end(), out.data.begin(), [](float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  });
  return out;
}

Grid2D<std::uint8_t> mask_to_u8(const Mask2D& mask) {
  Grid2D<std::uint8_t> out(mask.height, mask.width);
  std::transform(mask.data.begin(), mask.data.end(), out.data.begin(),
                 [](std::uint8_t v) -> std::uint8_t { return v ? 255 : 0; });
  return out;
}

Mask2D mask_from_u8(const Grid2D<std::uint8_t>& image) {
  Mask2D out(image.height, image.width);
  std::transform(image.data.begin(), image.data.end(), out.data.begin(),
                 [](std::uint8_t v) -> std::uint8_t { return v ? 1 : 0; });
  return out;
}

}  // namespace covsev
