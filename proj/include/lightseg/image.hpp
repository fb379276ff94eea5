#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "lightseg/errors.hpp"

namespace lightseg {

// 8-bit image, HWC layout. channels is 1 (gray / palette indices) or 3 (RGB).
struct ImageU8 {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// Reads a PNG. Grayscale and palette images come back as 1 channel with raw
// index/intensity values; RGB(A) comes back as 3 channels.
ImageU8 read_png(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const ImageU8& image);

}  // namespace lightseg
