#pragma once

#include "bmod/metrics.hpp"
#include "bmod/model.hpp"
#include "bmod/scenegen.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bmod::runner {

struct QualitativeFrame;

enum class EvalMode { kWindowed, kPerFrame };
std::string to_string(EvalMode mode);
EvalMode eval_mode_from_string(const std::string& s);

class SegmentationPredictor {
 public:
  virtual ~SegmentationPredictor() = default;
  // Labels for frames [start, start + length) of a sample, each [h * w],
  // with all recurrent and slot state reset at `start`.
  virtual std::vector<std::vector<int>> predict(const scenegen::VideoSample& sample, int sequence, int start,
                                                int length) const = 0;
  // Label that marks background, or nullopt to fall back to the largest
  // predicted segment.
  virtual std::optional<int> background_label() const = 0;
};

// Argmax over the attention maps of a trained model. Slot initialization
// noise is derived from the model seed and the window position, so repeated
// evaluations agree exactly.
class ModelPredictor : public SegmentationPredictor {
 public:
  explicit ModelPredictor(model::Model<float> model) : model_(std::move(model)) {}
  std::vector<std::vector<int>> predict(const scenegen::VideoSample& sample, int sequence, int start,
                                        int length) const override;
  std::optional<int> background_label() const override;
  const model::Model<float>& model() const { return model_; }

 private:
  model::Model<float> model_;
};

// windowed: non-overlapping windows of `window` frames (a shorter trailing
// window covers the remainder); per_frame: every frame on its own.
metrics::MetricReport evaluate(const SegmentationPredictor& predictor,
                               const std::vector<scenegen::VideoSample>& samples, EvalMode mode, int window);

// Loads a checkpoint and a dataset directory. The window length is the
// frames_per_clip recorded at training time.
metrics::MetricReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                               EvalMode mode);

// One frame from each of the first `count` samples, predicted in windowed mode.
std::vector<QualitativeFrame> qualitative_frames(const SegmentationPredictor& predictor,
                                                 const std::vector<scenegen::VideoSample>& samples, int window,
                                                 int count);

}  // namespace bmod::runner
