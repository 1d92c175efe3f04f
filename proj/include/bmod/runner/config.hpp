#pragma once

#include "bmod/model.hpp"
#include "bmod/motion_cues.hpp"
#include "bmod/objectives.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace bmod::runner {

enum class Guidance { kGt, kEstimated, kEstimatedFiltered };
std::string to_string(Guidance g);
Guidance guidance_from_string(const std::string& s);

// Where training/evaluation sequences come from: directories written by
// `generate`, or (when the directories are empty strings) sequences
// generated in memory from a scene preset.
struct DataConfig {
  std::string train_dir;
  std::string eval_dir;
  std::string preset = "easy";
  int num_train = 64;
  int num_eval = 16;
  std::uint64_t seed = 1;
  // Overrides applied to the preset's scene specs.
  std::array<int, 2> camera_pan{0, 0};
};

// How motion masks are derived from flow, and the label corruption applied in
// the estimated settings.
struct GuidanceConfig {
  double min_magnitude = 0.5;
  int min_area = 4;
  motion::NoiseConfig noise;
};

struct TrainConfig {
  int batch_size = 8;
  int frames_per_clip = 5;
  int steps = 5000;
  double step_size = 4e-4;
  int warmup_steps = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_grad_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  Guidance guidance = Guidance::kEstimated;
  GuidanceConfig guidance_params;
  objectives::LossConfig loss;
  model::ModelConfig model;
  DataConfig data;
  int log_every = 1;
  int checkpoint_every = 0;  // 0: final checkpoint only
  std::string output_dir;    // empty: nothing written during training
};

void to_json(nlohmann::json& j, const TrainConfig& c);

// Strict parse: unknown keys throw ConfigError naming the dotted key path.
TrainConfig train_config_from_json(const nlohmann::json& j);

// Applies "a.b.c=value" overrides to a config JSON. The value is parsed as
// JSON when possible and used as a string otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Checks cross-field invariants (B >= 1, T >= 2, model/data shapes).
void validate(const TrainConfig& c);

// Desk-scale presets: "tiny" (unit tests), "easy", "urban-toy".
TrainConfig train_preset(const std::string& name);

TrainConfig load_train_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace bmod::runner
