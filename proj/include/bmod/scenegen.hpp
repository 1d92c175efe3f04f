#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace bmod::scenegen {

enum class BackgroundKind { kFlat, kGradient, kPerlin, kTiled };

std::string to_string(BackgroundKind kind);
BackgroundKind background_kind_from_string(const std::string& name);

// Parameters of one synthetic clip. Velocities and camera pan are integral
// pixel displacements so that consecutive frames are exact translations.
struct SceneSpec {
  int image_height = 64;
  int image_width = 96;
  int num_frames = 5;
  int num_moving = 2;
  int num_static = 2;
  std::array<int, 2> sprite_size_range{10, 18};  // inclusive, pixels
  std::array<int, 2> velocity_range{1, 3};       // per-axis speed bounds, pixels/frame
  BackgroundKind background_kind = BackgroundKind::kGradient;
  std::array<int, 2> camera_pan{0, 0};           // (dx, dy) pixels/frame
  // Sprites never enter the top `spawn_top_fraction` of the rows. Gives the
  // road-below-horizon layout of driving scenes.
  double spawn_top_fraction = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const SceneSpec&) const = default;
};

void to_json(nlohmann::json& j, const SceneSpec& spec);
void from_json(const nlohmann::json& j, SceneSpec& spec);

// Throws ConfigError on malformed scene parameters.
void validate(const SceneSpec& spec);

struct VideoSample {
  SceneSpec spec;
  int num_frames = 0;
  int height = 0;
  int width = 0;
  std::vector<float> frames;               // [T, h, w, 3], multiples of 1/255
  std::vector<std::uint16_t> gt_instance;  // [T, h, w], 0 = background
  std::vector<bool> moving_flags;          // entry i describes instance id i + 1
  std::vector<float> flow;                 // [T, h, w, 2] forward flow (dx, dy)

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  int num_instances() const { return static_cast<int>(moving_flags.size()); }
  bool operator==(const VideoSample&) const = default;
};

// Pure function of `spec`. Throws ConfigError if it is invalid or the
// sprites cannot be placed so that they stay inside the frame for all frames.
VideoSample generate_sequence(const SceneSpec& spec);

// Named scene presets ("tiny", "easy", "urban-toy"); seed is filled in.
SceneSpec scene_preset(const std::string& name, std::uint64_t seed);

struct Manifest {
  int version = 1;
  int num_sequences = 0;
  std::vector<std::string> sequences;
};

inline constexpr int kDatasetVersion = 1;

// Layout: seq_{idx:04d}/{frame,inst,flow}_{t:04d}.{png,png,flo} + meta.json,
// and a top-level manifest.json.
Manifest write_dataset(const std::vector<VideoSample>& samples, const std::filesystem::path& dir);
std::vector<VideoSample> read_dataset(const std::filesystem::path& dir);

}  // namespace bmod::scenegen
