#include "bmod/runner/evaluate.hpp"

#include "bmod/checkpoint.hpp"
#include "bmod/error.hpp"
#include "bmod/rng.hpp"
#include "bmod/runner/train.hpp"

#include <algorithm>

namespace bmod::runner {

std::string to_string(EvalMode mode) { return mode == EvalMode::kWindowed ? "windowed" : "per_frame"; }

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "windowed") return EvalMode::kWindowed;
  if (s == "per_frame") return EvalMode::kPerFrame;
  throw ConfigError("unknown evaluation mode '" + s + "'");
}

std::vector<std::vector<int>> ModelPredictor::predict(const scenegen::VideoSample& sample, int sequence, int start,
                                                      int length) const {
  const auto& mc = model_.config();
  if (sample.height != mc.image_height || sample.width != mc.image_width)
    throw ConfigError("dataset frames are " + std::to_string(sample.height) + "x" + std::to_string(sample.width) +
                      " but the model expects " + std::to_string(mc.image_height) + "x" +
                      std::to_string(mc.image_width));
  const int h = sample.height, w = sample.width;
  const std::size_t hw = sample.pixels();
  // The tape binds parameters by address, so work on a private copy.
  model::Model<float> m = model_;
  nn::Tape<float> tape;
  auto p = m.bind(tape);
  std::vector<nn::Var<float>> frames;
  for (int t = start; t < start + length; ++t) {
    std::vector<float> x(3 * hw);
    for (std::size_t i = 0; i < hw; ++i)
      for (int c = 0; c < 3; ++c) x[c * hw + i] = sample.frames[(t * hw + i) * 3 + c];
    frames.push_back(tape.constant({1, 3, h, w}, std::move(x)));
  }
  Rng rng(derive_seed(mc.seed, (static_cast<std::uint64_t>(sequence) << 20) + static_cast<std::uint64_t>(start)));
  std::vector<float> noise(static_cast<std::size_t>(m.sampled_slots()) * mc.slot_dim);
  for (auto& v : noise) v = static_cast<float>(rng.normal());
  auto out = m.forward_sequence(p, tape, frames, m.initial_slots(p, tape, 1, noise));
  std::vector<std::vector<int>> labels;
  for (const auto& f : out)
    labels.push_back(model::predict_segmentation<float>(f.attention.value(), mc.grid_height(), mc.grid_width(),
                                                        mc.num_slots(), h, w));
  return labels;
}

std::optional<int> ModelPredictor::background_label() const {
  if (model_.config().background_slot) return 0;
  return std::nullopt;
}

namespace {

std::vector<int> gt_labels(const scenegen::VideoSample& s, int t) {
  const std::size_t hw = s.pixels();
  return std::vector<int>(s.gt_instance.begin() + t * hw, s.gt_instance.begin() + (t + 1) * hw);
}

}  // namespace

metrics::MetricReport evaluate(const SegmentationPredictor& predictor,
                               const std::vector<scenegen::VideoSample>& samples, EvalMode mode, int window) {
  if (window < 1) throw ConfigError("evaluation window must be >= 1");
  if (samples.empty()) throw ConfigError("evaluation set is empty");
  const int step = mode == EvalMode::kWindowed ? window : 1;
  const auto bg = predictor.background_label();
  std::vector<metrics::FrameScore> scores;
  for (std::size_t si = 0; si < samples.size(); ++si) {
    const auto& s = samples[si];
    for (int start = 0; start < s.num_frames; start += step) {
      const int len = std::min(step, s.num_frames - start);
      const auto pred = predictor.predict(s, static_cast<int>(si), start, len);
      for (int k = 0; k < len; ++k)
        scores.push_back(metrics::score_frame(gt_labels(s, start + k), pred[k], bg, static_cast<int>(si), start + k));
    }
  }
  return metrics::aggregate(std::move(scores), !bg.has_value());
}

metrics::MetricReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                               EvalMode mode) {
  model::CheckpointInfo info;
  auto m = model::load_checkpoint<float>(checkpoint, &info);
  int window = 5;
  if (info.extra.contains("frames_per_clip")) window = info.extra["frames_per_clip"].get<int>();
  const auto samples = scenegen::read_dataset(dataset);
  return evaluate(ModelPredictor(std::move(m)), samples, mode, window);
}

std::vector<QualitativeFrame> qualitative_frames(const SegmentationPredictor& predictor,
                                                 const std::vector<scenegen::VideoSample>& samples, int window,
                                                 int count) {
  std::vector<QualitativeFrame> out;
  for (int si = 0; si < std::min<int>(count, static_cast<int>(samples.size())); ++si) {
    const auto& s = samples[si];
    const int len = std::min(window, s.num_frames);
    const auto pred = predictor.predict(s, si, 0, len);
    QualitativeFrame q;
    q.sequence = si;
    q.frame = len - 1;
    q.height = s.height;
    q.width = s.width;
    const std::size_t hw = s.pixels();
    q.rgb.resize(hw * 3);
    for (std::size_t i = 0; i < hw * 3; ++i)
      q.rgb[i] = static_cast<std::uint8_t>(std::clamp(s.frames[q.frame * hw * 3 + i] * 255.0f + 0.5f, 0.0f, 255.0f));
    q.gt = gt_labels(s, q.frame);
    q.prediction = pred.back();
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace bmod::runner
