#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace mfr {

// 8-bit RGBA raster, rows top to bottom, 4 bytes per pixel.
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, std::uint8_t fill = 0);

  std::uint8_t* at(std::size_t x, std::size_t y) { return &pixels[(y * width + x) * 4]; }
  const std::uint8_t* at(std::size_t x, std::size_t y) const {
    return &pixels[(y * width + x) * 4];
  }

  friend bool operator==(const Raster&, const Raster&) = default;
};

// Any PNG colour type is expanded to 8-bit RGBA on read.
Raster read_png(const std::filesystem::path& path);
void write_png(const Raster& image, const std::filesystem::path& path);

}  // namespace mfr
