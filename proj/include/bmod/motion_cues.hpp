#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bmod::scenegen {
struct VideoSample;
}

namespace bmod::motion {

// Binary mask, row-major, values 0/1.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

  std::size_t size() const { return data.size(); }
  std::size_t area() const;
  bool empty_mask() const { return area() == 0; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const Mask&) const = default;
};

enum class Provenance { kGt, kEstimated, kInjectedNoise };
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct MotionMask {
  Mask mask;
  Provenance provenance = Provenance::kEstimated;
  bool operator==(const MotionMask&) const = default;
};

// Masks for one frame. May be empty.
using FrameMasks = std::vector<MotionMask>;

// Per-frame motion masks of one clip.
struct MotionMaskSet {
  int height = 0;
  int width = 0;
  std::vector<FrameMasks> frames;
  bool operator==(const MotionMaskSet&) const = default;
};

struct MovingForeground {
  Mask m_fg;
  std::size_t unlabeled_count = 0;  // zero pixels of m_fg
};

// Camera-compensated flow segmentation for one frame. `flow` is [h, w, 2].
// Subtracts the per-frame median flow, thresholds the residual magnitude at
// `min_magnitude`, splits 4-connected components and drops those smaller
// than `min_area` pixels.
FrameMasks extract_motion_masks(std::span<const float> flow, int height, int width,
                                double min_magnitude, int min_area);

// Applies extract_motion_masks to every frame of a clip.
MotionMaskSet extract_motion_masks(const scenegen::VideoSample& sample, double min_magnitude,
                                   int min_area);

// Instance masks of moving objects read from ground truth.
MotionMaskSet gt_motion_masks(const scenegen::VideoSample& sample);

// Pixelwise union. Throws std::invalid_argument on dimension mismatch.
MovingForeground fuse_foreground(std::span<const MotionMask> masks, int height, int width);

struct NoiseConfig {
  double drop_rate = 0.0;
  double spurious_rate = 0.0;            // expected blobs per frame
  std::array<int, 2> blob_size_range{3, 8};
  // Vertical band (fractions of the image height) for blob centers.
  std::array<double, 2> row_band{0.0, 1.0};
};

// Drops true masks with probability drop_rate, then adds Poisson(spurious_rate)
// random elliptical blobs per frame tagged kInjectedNoise. Deterministic in seed.
MotionMaskSet inject_label_noise(const MotionMaskSet& set, const NoiseConfig& noise, std::uint64_t seed);

// Removes every mask whose centroid row lies above image_height / 3.
MotionMaskSet filter_top_tier(const MotionMaskSet& set, int image_height);
FrameMasks filter_top_tier(const FrameMasks& masks, int image_height);

// Area-average pooling to (out_h, out_w) followed by a >= 0.5 threshold.
Mask resize_to_attention(const Mask& mask, int out_h, int out_w);

// Mask stacks as 8-bit PNGs (mask_{t:04d}_{c:02d}.png, 0/255) plus masks.json.
void write_mask_set(const MotionMaskSet& set, const std::filesystem::path& dir);
MotionMaskSet read_mask_set(const std::filesystem::path& dir);

}  // namespace bmod::motion
