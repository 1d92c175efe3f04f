#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace bmod::io {

// Raster with interleaved channels, row-major.
template <typename Pixel>
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<Pixel> data;

  bool operator==(const Raster&) const = default;
};

using Image8 = Raster<std::uint8_t>;
using Image16 = Raster<std::uint16_t>;

// 8-bit PNG, 1 (gray) or 3 (RGB) channels.
void write_png8(const std::filesystem::path& path, const Image8& image);
Image8 read_png8(const std::filesystem::path& path);

// 16-bit single-channel PNG.
void write_png16(const std::filesystem::path& path, const Image16& image);
Image16 read_png16(const std::filesystem::path& path);

// Middlebury .flo: "PIEH" tag, int32 width, int32 height, then interleaved
// (u, v) float32 pairs, all little-endian.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<float> uv;

  bool operator==(const FlowField&) const = default;
};

void write_flo(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flo(const std::filesystem::path& path);

}  // namespace bmod::io
