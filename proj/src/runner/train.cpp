#include "bmod/runner/train.hpp"

#include "bmod/checkpoint.hpp"
#include "bmod/error.hpp"
#include "bmod/rng.hpp"
#include "bmod/runner/evaluate.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace bmod::runner {

motion::MotionMaskSet guidance_masks(const scenegen::VideoSample& sample, Guidance guidance,
                                     const GuidanceConfig& params, std::uint64_t noise_seed) {
  if (guidance == Guidance::kGt) return motion::gt_motion_masks(sample);
  auto masks = motion::extract_motion_masks(sample, params.min_magnitude, params.min_area);
  masks = motion::inject_label_noise(masks, params.noise, noise_seed);
  if (guidance == Guidance::kEstimatedFiltered) masks = motion::filter_top_tier(masks, sample.height);
  return masks;
}

objectives::FrameSupervision frame_supervision(const motion::FrameMasks& masks, int grid_h, int grid_w) {
  objectives::FrameSupervision sup;
  std::vector<motion::MotionMask> kept;
  for (const auto& m : masks) {
    motion::Mask small = motion::resize_to_attention(m.mask, grid_h, grid_w);
    if (small.empty_mask()) continue;
    kept.push_back({small, m.provenance});
    sup.masks.push_back(std::move(small));
  }
  sup.m_fg = motion::fuse_foreground(kept, grid_h, grid_w).m_fg;
  return sup;
}

PreparedSequence prepare_sequence(const scenegen::VideoSample& sample, const TrainConfig& config,
                                  std::uint64_t noise_seed) {
  const auto& mc = config.model;
  if (sample.height != mc.image_height || sample.width != mc.image_width)
    throw ConfigError("sequence is " + std::to_string(sample.height) + "x" + std::to_string(sample.width) +
                      " but the model expects " + std::to_string(mc.image_height) + "x" +
                      std::to_string(mc.image_width));
  PreparedSequence p;
  p.num_frames = sample.num_frames;
  p.height = sample.height;
  p.width = sample.width;
  const std::size_t hw = sample.pixels();
  p.frames.resize(static_cast<std::size_t>(p.num_frames) * 3 * hw);
  p.gt.resize(static_cast<std::size_t>(p.num_frames) * hw);
  for (int t = 0; t < p.num_frames; ++t)
    for (std::size_t i = 0; i < hw; ++i) {
      for (int c = 0; c < 3; ++c)
        p.frames[(static_cast<std::size_t>(t) * 3 + c) * hw + i] = sample.frames[(t * hw + i) * 3 + c];
      p.gt[t * hw + i] = sample.gt_instance[t * hw + i];
    }
  const auto masks = guidance_masks(sample, config.guidance, config.guidance_params, noise_seed);
  for (const auto& frame : masks.frames)
    p.supervision.push_back(frame_supervision(frame, mc.grid_height(), mc.grid_width()));
  return p;
}

std::vector<PreparedSequence> prepare_sequences(const std::vector<scenegen::VideoSample>& samples,
                                                const TrainConfig& config) {
  std::vector<PreparedSequence> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    out.push_back(prepare_sequence(samples[i], config, derive_seed(config.data.seed, 0x6e6f697365ULL + i)));
  return out;
}

Datasets load_datasets(const DataConfig& data) {
  Datasets d;
  if (!data.train_dir.empty()) {
    d.train = scenegen::read_dataset(data.train_dir);
    d.eval = scenegen::read_dataset(data.eval_dir.empty() ? data.train_dir : data.eval_dir);
    return d;
  }
  auto make = [&](int count, std::uint64_t stream) {
    std::vector<scenegen::VideoSample> out;
    for (int i = 0; i < count; ++i) {
      auto spec = scenegen::scene_preset(data.preset, derive_seed(data.seed, stream + i));
      spec.camera_pan = data.camera_pan;
      out.push_back(scenegen::generate_sequence(spec));
    }
    return out;
  };
  d.train = make(data.num_train, 0);
  d.eval = make(data.num_eval, 1u << 20);
  return d;
}

model::ModelConfig effective_model_config(const TrainConfig& config) {
  model::ModelConfig mc = config.model;
  mc.seed = derive_seed(config.seed, config.model.seed);
  return mc;
}

Trainer::Trainer(const TrainConfig& config, std::vector<PreparedSequence> data)
    : config_(config), data_(std::move(data)), model_(effective_model_config(config)) {
  validate(config_);
  if (data_.empty()) throw ConfigError("training set is empty");
  for (const auto& s : data_)
    if (s.num_frames < config_.frames_per_clip)
      throw ConfigError("a training sequence is shorter than frames_per_clip");
  for (const auto& p : model_.parameters()) {
    m1_.emplace_back(p.value.size(), 0.0);
    m2_.emplace_back(p.value.size(), 0.0);
  }
}

Batch Trainer::sample_batch(int step) const {
  Batch b;
  b.id = derive_seed(config_.seed, 0xba7c0000ULL + static_cast<std::uint64_t>(step));
  Rng rng(b.id);
  for (int i = 0; i < config_.batch_size; ++i) {
    const int seq = rng.integer(0, static_cast<int>(data_.size()) - 1);
    const int start = rng.integer(0, data_[seq].num_frames - config_.frames_per_clip);
    b.clips.emplace_back(seq, start);
  }
  b.slot_noise.resize(static_cast<std::size_t>(config_.batch_size) * model_.sampled_slots() *
                      config_.model.slot_dim);
  for (auto& v : b.slot_noise) v = static_cast<float>(rng.normal());
  return b;
}

template <typename T>
objectives::LossBreakdown batch_loss(model::Model<T>& model, const std::vector<PreparedSequence>& data,
                                     const std::vector<std::pair<int, int>>& clips, int frames_per_clip,
                                     std::span<const T> slot_noise, const objectives::LossConfig& loss_config,
                                     bool backward) {
  const auto& mc = model.config();
  const int bsz = static_cast<int>(clips.size());
  const int t_len = frames_per_clip;
  const int h = mc.image_height, w = mc.image_width;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const int n = mc.grid_size(), s = mc.num_slots();

  nn::Tape<T> tape;
  auto p = model.bind(tape);
  std::vector<nn::Var<T>> frames;
  for (int t = 0; t < t_len; ++t) {
    std::vector<T> x(static_cast<std::size_t>(bsz) * 3 * hw);
    for (int b = 0; b < bsz; ++b) {
      const auto& seq = data[clips[b].first];
      const float* src = seq.frames.data() + static_cast<std::size_t>(clips[b].second + t) * 3 * hw;
      std::copy_n(src, 3 * hw, x.data() + static_cast<std::size_t>(b) * 3 * hw);
    }
    frames.push_back(tape.constant({bsz, 3, h, w}, std::move(x)));
  }
  auto init = model.initial_slots(p, tape, bsz, slot_noise);
  auto out = model.forward_sequence(p, tape, frames, init);

  // Losses are evaluated in double outside the tape; frame order is (b, t).
  const std::size_t frame_att = static_cast<std::size_t>(n) * s;
  std::vector<std::vector<double>> attention(static_cast<std::size_t>(bsz) * t_len);
  std::vector<objectives::FrameSupervision> sup(attention.size());
  std::vector<double> recon, target;
  recon.reserve(attention.size() * 3 * hw);
  target.reserve(attention.size() * 3 * hw);
  objectives::LossInputs in;
  in.num_positions = n;
  in.num_slots = s;
  in.background_slot = mc.background_slot;
  for (int b = 0; b < bsz; ++b) {
    const auto& seq = data[clips[b].first];
    for (int t = 0; t < t_len; ++t) {
      const std::size_t f = static_cast<std::size_t>(b) * t_len + t;
      const auto att = out[t].attention.value().subspan(b * frame_att, frame_att);
      attention[f].assign(att.begin(), att.end());
      const int frame = clips[b].second + t;
      sup[f] = seq.supervision[frame];
      sup[f].match = objectives::match_masks_to_slots(sup[f].masks, attention[f], n, s, mc.first_object_slot(),
                                                      loss_config.log_epsilon);
      const auto rec = out[t].reconstruction.value().subspan(b * 3 * hw, 3 * hw);
      recon.insert(recon.end(), rec.begin(), rec.end());
      const float* src = seq.frames.data() + static_cast<std::size_t>(frame) * 3 * hw;
      target.insert(target.end(), src, src + 3 * hw);
    }
  }
  for (std::size_t f = 0; f < attention.size(); ++f) in.frames.push_back({attention[f], &sup[f]});
  in.reconstruction = recon;
  in.target = target;

  objectives::LossGradients grads;
  const auto loss = objectives::total_loss(in, loss_config, backward ? &grads : nullptr);
  if (!backward || !std::isfinite(loss.total)) return loss;

  for (int t = 0; t < t_len; ++t) {
    std::vector<T> ga(static_cast<std::size_t>(bsz) * frame_att);
    std::vector<T> gr(static_cast<std::size_t>(bsz) * 3 * hw);
    for (int b = 0; b < bsz; ++b) {
      const std::size_t f = static_cast<std::size_t>(b) * t_len + t;
      std::copy(grads.attention[f].begin(), grads.attention[f].end(), ga.begin() + b * frame_att);
      const double* src = grads.reconstruction.data() + f * 3 * hw;
      std::copy(src, src + 3 * hw, gr.begin() + b * 3 * hw);
    }
    tape.seed(out[t].attention, ga);
    tape.seed(out[t].reconstruction, gr);
  }
  model.zero_grad();
  tape.backward();
  return loss;
}

template objectives::LossBreakdown batch_loss<float>(model::Model<float>&, const std::vector<PreparedSequence>&,
                                                     const std::vector<std::pair<int, int>>&, int,
                                                     std::span<const float>, const objectives::LossConfig&, bool);
template objectives::LossBreakdown batch_loss<double>(model::Model<double>&, const std::vector<PreparedSequence>&,
                                                      const std::vector<std::pair<int, int>>&, int,
                                                      std::span<const double>, const objectives::LossConfig&, bool);

objectives::LossBreakdown Trainer::run(const Batch& batch, bool update) {
  const auto loss = batch_loss<float>(model_, data_, batch.clips, config_.frames_per_clip, batch.slot_noise,
                                      config_.loss, update);
  if (!std::isfinite(loss.total)) {
    std::string clips;
    for (const auto& [seq, start] : batch.clips)
      clips += " (" + std::to_string(seq) + "," + std::to_string(start) + ")";
    throw NumericError("non-finite loss at step " + std::to_string(step_) + ", batch id " +
                       std::to_string(batch.id) + ", clips" + clips);
  }
  if (!update) return loss;
  adam_update();
  ++step_;
  return loss;
}

objectives::LossBreakdown Trainer::step() { return run(sample_batch(step_), true); }

void Trainer::adam_update() {
  auto& params = model_.parameters();
  double scale = 1.0;
  if (config_.clip_grad_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params)
      for (float g : p.grad) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_grad_norm) scale = config_.clip_grad_norm / norm;
  }
  const int t = step_ + 1;
  double lr = config_.step_size;
  if (config_.warmup_steps > 0 && t < config_.warmup_steps) lr *= static_cast<double>(t) / config_.warmup_steps;
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = m1_[k];
    auto& v = m2_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = scale * p.grad[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      p.value[i] -= static_cast<float>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.adam_eps));
    }
  }
}

void to_json(nlohmann::json& j, const ExperimentResult& r) {
  nlohmann::json log = nlohmann::json::array();
  for (const auto& s : r.loss_log) log.push_back({{"step", s.step}, {"loss", s.loss}});
  nlohmann::json qual = nlohmann::json::array();
  for (const auto& q : r.qualitative)
    qual.push_back({{"sequence", q.sequence},
                    {"frame", q.frame},
                    {"height", q.height},
                    {"width", q.width},
                    {"rgb", q.rgb},
                    {"gt", q.gt},
                    {"prediction", q.prediction}});
  j = nlohmann::json{{"name", r.name},
                     {"config", r.config},
                     {"report", r.report},
                     {"loss_log", log},
                     {"wall_seconds", r.wall_seconds},
                     {"checkpoint", r.checkpoint},
                     {"background_slot", r.background_slot},
                     {"qualitative", qual}};
}

void from_json(const nlohmann::json& j, ExperimentResult& r) {
  j.at("name").get_to(r.name);
  r.config = j.at("config");
  j.at("report").get_to(r.report);
  r.loss_log.clear();
  for (const auto& e : j.at("loss_log")) {
    StepLog s;
    e.at("step").get_to(s.step);
    const auto& l = e.at("loss");
    l.at("mse").get_to(s.loss.mse);
    l.at("wbce").get_to(s.loss.wbce);
    l.at("fgbg").get_to(s.loss.fgbg);
    l.at("total").get_to(s.loss.total);
    r.loss_log.push_back(s);
  }
  j.at("wall_seconds").get_to(r.wall_seconds);
  j.at("checkpoint").get_to(r.checkpoint);
  j.at("background_slot").get_to(r.background_slot);
  r.qualitative.clear();
  for (const auto& e : j.at("qualitative")) {
    QualitativeFrame q;
    e.at("sequence").get_to(q.sequence);
    e.at("frame").get_to(q.frame);
    e.at("height").get_to(q.height);
    e.at("width").get_to(q.width);
    e.at("rgb").get_to(q.rgb);
    e.at("gt").get_to(q.gt);
    e.at("prediction").get_to(q.prediction);
    r.qualitative.push_back(std::move(q));
  }
}

ExperimentResult train(const TrainConfig& config) { return train(config, load_datasets(config.data)); }

ExperimentResult train(const TrainConfig& config, const Datasets& data, const std::string& name) {
  const auto started = std::chrono::steady_clock::now();
  validate(config);
  ExperimentResult result;
  result.name = name;
  result.config = config;
  result.background_slot = config.model.background_slot;

  namespace fs = std::filesystem;
  const fs::path out_dir = config.output_dir;
  std::ofstream loss_file;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    loss_file.open(out_dir / "loss.jsonl");
    if (!loss_file) throw IoError("cannot write " + (out_dir / "loss.jsonl").string());
  }

  Trainer trainer(config, prepare_sequences(data.train, config));
  auto checkpoint = [&](const fs::path& path) {
    model::save_checkpoint(path, trainer.model(), trainer.steps_done(),
                           {{"frames_per_clip", config.frames_per_clip}, {"train_config", config}});
  };
  for (int s = 0; s < config.steps; ++s) {
    const auto loss = trainer.step();
    if (s % config.log_every == 0 || s + 1 == config.steps) {
      result.loss_log.push_back({s, loss});
      if (loss_file) loss_file << nlohmann::json{{"step", s}, {"loss", loss}}.dump() << '\n';
    }
    if (!out_dir.empty() && config.checkpoint_every > 0 && (s + 1) % config.checkpoint_every == 0)
      checkpoint(out_dir / ("step_" + std::to_string(s + 1) + ".ckpt"));
  }
  if (!out_dir.empty()) {
    const fs::path final_path = out_dir / "final.ckpt";
    checkpoint(final_path);
    result.checkpoint = final_path.string();
  }

  ModelPredictor predictor(trainer.model());
  result.report = evaluate(predictor, data.eval, EvalMode::kWindowed, config.frames_per_clip);
  result.qualitative = qualitative_frames(predictor, data.eval, config.frames_per_clip, 4);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (!out_dir.empty()) {
    std::ofstream os(out_dir / "metrics.json");
    os << nlohmann::json(result.report).dump(2) << '\n';
  }
  return result;
}

}  // namespace bmod::runner
