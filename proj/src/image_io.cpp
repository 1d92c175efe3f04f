#include "bmod/image_io.hpp"

#include "bmod/error.hpp"

#include <png.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace bmod::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

// Rows are passed to libpng as big-endian byte sequences.
void write_png(const std::filesystem::path& path, int width, int height, int channels, int depth,
               const std::vector<std::vector<png_byte>>& rows) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path.string());
  }
  png_init_io(png, f.get());
  const int color = channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, width, height, depth, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& row : rows) png_write_row(png, row.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct Decoded {
  int width = 0, height = 0, channels = 0, depth = 0;
  std::vector<std::vector<png_byte>> rows;
};

Decoded read_png(const std::filesystem::path& path) {
  FilePtr f = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  Decoded d;
  d.width = static_cast<int>(png_get_image_width(png, info));
  d.height = static_cast<int>(png_get_image_height(png, info));
  d.depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_RGB)
    d.channels = 3;
  else if (color == PNG_COLOR_TYPE_GRAY)
    d.channels = 1;
  else {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG color type in " + path.string());
  }
  const std::size_t stride = png_get_rowbytes(png, info);
  d.rows.assign(d.height, std::vector<png_byte>(stride));
  for (auto& row : d.rows) png_read_row(png, row.data(), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

void check_raster(const auto& image, const std::filesystem::path& path) {
  if (image.width <= 0 || image.height <= 0 ||
      image.data.size() != static_cast<std::size_t>(image.width) * image.height * image.channels)
    throw IoError("inconsistent raster for " + path.string());
}

}  // namespace

void write_png8(const std::filesystem::path& path, const Image8& image) {
  check_raster(image, path);
  if (image.channels != 1 && image.channels != 3)
    throw IoError("PNG8 needs 1 or 3 channels: " + path.string());
  const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
  std::vector<std::vector<png_byte>> rows(image.height);
  for (int y = 0; y < image.height; ++y)
    rows[y].assign(image.data.begin() + y * stride, image.data.begin() + (y + 1) * stride);
  write_png(path, image.width, image.height, image.channels, 8, rows);
}

Image8 read_png8(const std::filesystem::path& path) {
  Decoded d = read_png(path);
  if (d.depth != 8) throw IoError("expected 8-bit PNG: " + path.string());
  Image8 out{d.width, d.height, d.channels, {}};
  out.data.reserve(static_cast<std::size_t>(d.width) * d.height * d.channels);
  for (const auto& row : d.rows)
    out.data.insert(out.data.end(), row.begin(), row.begin() + d.width * d.channels);
  return out;
}

void write_png16(const std::filesystem::path& path, const Image16& image) {
  check_raster(image, path);
  if (image.channels != 1) throw IoError("PNG16 needs 1 channel: " + path.string());
  std::vector<std::vector<png_byte>> rows(image.height, std::vector<png_byte>(image.width * 2));
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const std::uint16_t v = image.data[y * image.width + x];
      rows[y][2 * x] = static_cast<png_byte>(v >> 8);
      rows[y][2 * x + 1] = static_cast<png_byte>(v & 0xff);
    }
  write_png(path, image.width, image.height, 1, 16, rows);
}

Image16 read_png16(const std::filesystem::path& path) {
  Decoded d = read_png(path);
  if (d.depth != 16 || d.channels != 1)
    throw IoError("expected 16-bit grayscale PNG: " + path.string());
  Image16 out{d.width, d.height, 1, std::vector<std::uint16_t>(static_cast<std::size_t>(d.width) * d.height)};
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x)
      out.data[y * d.width + x] =
          static_cast<std::uint16_t>((d.rows[y][2 * x] << 8) | d.rows[y][2 * x + 1]);
  return out;
}

namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
bool get_le(std::istream& is, U& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(U)));
}

constexpr float kFloTag = 202021.25f;  // "PIEH"

}  // namespace

void write_flo(const std::filesystem::path& path, const FlowField& flow) {
  if (flow.uv.size() != static_cast<std::size_t>(flow.width) * flow.height * 2)
    throw IoError("inconsistent flow field for " + path.string());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  put_le(os, kFloTag);
  put_le(os, static_cast<std::int32_t>(flow.width));
  put_le(os, static_cast<std::int32_t>(flow.height));
  for (float v : flow.uv) put_le(os, v);
  if (!os) throw IoError("write failed: " + path.string());
}

FlowField read_flo(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  float tag = 0;
  std::int32_t w = 0, h = 0;
  if (!get_le(is, tag) || tag != kFloTag) throw IoError("bad .flo tag: " + path.string());
  if (!get_le(is, w) || !get_le(is, h) || w <= 0 || h <= 0 || w > (1 << 15) || h > (1 << 15))
    throw IoError("bad .flo dimensions: " + path.string());
  FlowField f{w, h, std::vector<float>(static_cast<std::size_t>(w) * h * 2)};
  if (!is.read(reinterpret_cast<char*>(f.uv.data()), static_cast<std::streamsize>(f.uv.size() * sizeof(float))))
    throw IoError("truncated .flo: " + path.string());
  return f;
}

}  // namespace bmod::io
