#pragma once

#include "bmod/metrics.hpp"
#include "bmod/model.hpp"
#include "bmod/objectives.hpp"
#include "bmod/runner/config.hpp"
#include "bmod/scenegen.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bmod::runner {

// A sequence in the layout the model consumes, with its guidance precomputed
// at attention resolution.
struct PreparedSequence {
  int num_frames = 0;
  int height = 0;
  int width = 0;
  std::vector<float> frames;  // [T, 3, h, w]
  std::vector<int> gt;        // [T, h * w]
  std::vector<objectives::FrameSupervision> supervision;  // per frame; match left empty
};

// Raw motion masks for one sample under the chosen guidance.
// `noise_seed` drives label corruption in the estimated settings.
motion::MotionMaskSet guidance_masks(const scenegen::VideoSample& sample, Guidance guidance,
                                     const GuidanceConfig& params, std::uint64_t noise_seed);

// Resizes each mask to (grid_h, grid_w), drops masks that vanish, and fuses
// the survivors into m_fg.
objectives::FrameSupervision frame_supervision(const motion::FrameMasks& masks, int grid_h, int grid_w);

PreparedSequence prepare_sequence(const scenegen::VideoSample& sample, const TrainConfig& config,
                                  std::uint64_t noise_seed);
std::vector<PreparedSequence> prepare_sequences(const std::vector<scenegen::VideoSample>& samples,
                                                const TrainConfig& config);

struct Datasets {
  std::vector<scenegen::VideoSample> train;
  std::vector<scenegen::VideoSample> eval;
};

// Reads data.train_dir / data.eval_dir, or generates from data.preset when
// the directories are unset.
Datasets load_datasets(const DataConfig& data);

struct StepLog {
  int step = 0;
  objectives::LossBreakdown loss;
};

// Clip choice and slot noise for one optimizer step.
struct Batch {
  std::uint64_t id = 0;
  std::vector<std::pair<int, int>> clips;  // (sequence, first frame)
  std::vector<float> slot_noise;
};

// Forward pass over `clips` (sequence, first frame), slot matching and the
// total loss. With `backward` set and a finite loss, parameter gradients are
// overwritten with the loss gradient. Instantiated for float and double.
template <typename T>
objectives::LossBreakdown batch_loss(model::Model<T>& model, const std::vector<PreparedSequence>& data,
                                     const std::vector<std::pair<int, int>>& clips, int frames_per_clip,
                                     std::span<const T> slot_noise, const objectives::LossConfig& loss_config,
                                     bool backward);

class Trainer {
 public:
  Trainer(const TrainConfig& config, std::vector<PreparedSequence> data);

  Batch sample_batch(int step) const;
  // Forward, match, loss; accumulates parameter gradients when `update` and
  // applies one optimizer step. Throws NumericError on a non-finite loss.
  objectives::LossBreakdown run(const Batch& batch, bool update);
  objectives::LossBreakdown step();

  int steps_done() const { return step_; }
  const TrainConfig& config() const { return config_; }
  model::Model<float>& model() { return model_; }
  const model::Model<float>& model() const { return model_; }

 private:
  TrainConfig config_;
  std::vector<PreparedSequence> data_;
  model::Model<float> model_;
  std::vector<std::vector<double>> m1_, m2_;
  int step_ = 0;

  void adam_update();
};

// The effective model config of a training run (seed mixed with the run seed).
model::ModelConfig effective_model_config(const TrainConfig& config);

struct QualitativeFrame {
  int sequence = 0;
  int frame = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;  // [h, w, 3]
  std::vector<int> gt;            // [h, w]
  std::vector<int> prediction;    // [h, w]
};

struct ExperimentResult {
  std::string name;
  nlohmann::json config;
  metrics::MetricReport report;
  std::vector<StepLog> loss_log;
  double wall_seconds = 0.0;
  std::string checkpoint;
  bool background_slot = true;
  std::vector<QualitativeFrame> qualitative;
};

void to_json(nlohmann::json& j, const ExperimentResult& r);
void from_json(const nlohmann::json& j, ExperimentResult& r);

// Trains on the configured data and evaluates (windowed) on the eval split.
// Writes loss.jsonl, checkpoints and metrics.json under output_dir if set.
ExperimentResult train(const TrainConfig& config);
ExperimentResult train(const TrainConfig& config, const Datasets& data, const std::string& name = "run");

}  // namespace bmod::runner
