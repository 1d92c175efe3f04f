#include "bmod/runner/config.hpp"

#include "bmod/error.hpp"
#include "bmod/scenegen.hpp"

#include <fstream>

namespace bmod::runner {

std::string to_string(Guidance g) {
  switch (g) {
    case Guidance::kGt: return "gt";
    case Guidance::kEstimated: return "estimated";
    case Guidance::kEstimatedFiltered: return "estimated_filtered";
  }
  return "estimated";
}

Guidance guidance_from_string(const std::string& s) {
  if (s == "gt") return Guidance::kGt;
  if (s == "estimated") return Guidance::kEstimated;
  if (s == "estimated_filtered") return Guidance::kEstimatedFiltered;
  throw ConfigError("unknown guidance '" + s + "'");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  const auto& n = c.guidance_params.noise;
  j = nlohmann::json{
      {"batch_size", c.batch_size},
      {"frames_per_clip", c.frames_per_clip},
      {"steps", c.steps},
      {"step_size", c.step_size},
      {"warmup_steps", c.warmup_steps},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"adam_eps", c.adam_eps},
      {"clip_grad_norm", c.clip_grad_norm},
      {"seed", c.seed},
      {"guidance", to_string(c.guidance)},
      {"guidance_params",
       {{"min_magnitude", c.guidance_params.min_magnitude},
        {"min_area", c.guidance_params.min_area},
        {"noise",
         {{"drop_rate", n.drop_rate},
          {"spurious_rate", n.spurious_rate},
          {"blob_size_range", n.blob_size_range},
          {"row_band", n.row_band}}}}},
      {"loss", c.loss},
      {"model", c.model},
      {"data",
       {{"train_dir", c.data.train_dir},
        {"eval_dir", c.data.eval_dir},
        {"preset", c.data.preset},
        {"num_train", c.data.num_train},
        {"num_eval", c.data.num_eval},
        {"seed", c.data.seed},
        {"camera_pan", c.data.camera_pan}}},
      {"log_every", c.log_every},
      {"checkpoint_every", c.checkpoint_every},
      {"output_dir", c.output_dir}};
}

namespace {

// Overlays `patch` onto `base`, rejecting keys that `base` does not have.
void strict_merge(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("expected an object at '" + (prefix.empty() ? "<root>" : prefix) + "'");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (base[key].is_object())
      strict_merge(base[key], value, path);
    else
      base[key] = value;
  }
}

TrainConfig decode(const nlohmann::json& j) {
  TrainConfig c;
  try {
    j.at("batch_size").get_to(c.batch_size);
    j.at("frames_per_clip").get_to(c.frames_per_clip);
    j.at("steps").get_to(c.steps);
    j.at("step_size").get_to(c.step_size);
    j.at("warmup_steps").get_to(c.warmup_steps);
    j.at("beta1").get_to(c.beta1);
    j.at("beta2").get_to(c.beta2);
    j.at("adam_eps").get_to(c.adam_eps);
    j.at("clip_grad_norm").get_to(c.clip_grad_norm);
    j.at("seed").get_to(c.seed);
    c.guidance = guidance_from_string(j.at("guidance").get<std::string>());
    const auto& g = j.at("guidance_params");
    g.at("min_magnitude").get_to(c.guidance_params.min_magnitude);
    g.at("min_area").get_to(c.guidance_params.min_area);
    const auto& n = g.at("noise");
    n.at("drop_rate").get_to(c.guidance_params.noise.drop_rate);
    n.at("spurious_rate").get_to(c.guidance_params.noise.spurious_rate);
    n.at("blob_size_range").get_to(c.guidance_params.noise.blob_size_range);
    n.at("row_band").get_to(c.guidance_params.noise.row_band);
    c.loss = j.at("loss").get<objectives::LossConfig>();
    c.model = j.at("model").get<model::ModelConfig>();
    const auto& d = j.at("data");
    d.at("train_dir").get_to(c.data.train_dir);
    d.at("eval_dir").get_to(c.data.eval_dir);
    d.at("preset").get_to(c.data.preset);
    d.at("num_train").get_to(c.data.num_train);
    d.at("num_eval").get_to(c.data.num_eval);
    d.at("seed").get_to(c.data.seed);
    d.at("camera_pan").get_to(c.data.camera_pan);
    j.at("log_every").get_to(c.log_every);
    j.at("checkpoint_every").get_to(c.checkpoint_every);
    j.at("output_dir").get_to(c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  return c;
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j) {
  // Presets provide the base; a "preset" key at the root selects one.
  nlohmann::json patch = j;
  std::string preset = "easy";
  if (patch.is_object() && patch.contains("preset")) {
    preset = patch["preset"].get<std::string>();
    patch.erase("preset");
  }
  nlohmann::json base = train_preset(preset);
  strict_merge(base, patch, "");
  TrainConfig c = decode(base);
  validate(c);
  return c;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.frames_per_clip < 2) throw ConfigError("frames_per_clip must be >= 2");
  if (c.steps < 0) throw ConfigError("steps must be >= 0");
  if (!(c.step_size > 0.0)) throw ConfigError("step_size must be > 0");
  if (c.warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (c.log_every < 1) throw ConfigError("log_every must be >= 1");
  model::validate(c.model);
  if (c.loss.ablation_mode == objectives::AblationMode::kNoBgSlot && c.model.background_slot)
    throw ConfigError("ablation_mode no_bg_slot requires model.background_slot = false");
  if (c.loss.ablation_mode != objectives::AblationMode::kNoBgSlot && !c.model.background_slot)
    throw ConfigError("model.background_slot = false is only valid with ablation_mode no_bg_slot");
  if (c.data.train_dir.empty()) {
    if (c.data.num_train < 1 || c.data.num_eval < 1) throw ConfigError("data.num_train and data.num_eval must be >= 1");
    const auto spec = scenegen::scene_preset(c.data.preset, 0);
    if (spec.image_height != c.model.image_height || spec.image_width != c.model.image_width)
      throw ConfigError("model image size does not match data preset '" + c.data.preset + "'");
    if (spec.num_frames < c.frames_per_clip) throw ConfigError("frames_per_clip exceeds sequence length");
  }
}

TrainConfig train_preset(const std::string& name) {
  TrainConfig c;
  if (name == "tiny") {
    c.batch_size = 2;
    c.frames_per_clip = 2;
    c.steps = 20;
    c.step_size = 1e-3;
    c.warmup_steps = 0;
    c.model.image_height = 16;
    c.model.image_width = 16;
    c.model.num_object_slots = 2;
    c.model.slot_dim = 8;
    c.model.feature_dim = 8;
    c.model.projection_dim = 8;
    c.model.encoder_channels = {4, 8, 8};
    c.model.decoder_channels = 4;
    c.data.preset = "tiny";
    c.data.num_train = 4;
    c.data.num_eval = 2;
    c.guidance_params.min_area = 2;
  } else if (name == "easy" || name == "urban-toy") {
    c.batch_size = 4;
    c.frames_per_clip = 4;
    c.steps = name == "easy" ? 1500 : 3000;
    c.step_size = 1e-3;
    c.warmup_steps = 100;
    c.model.image_height = 32;
    c.model.image_width = 48;
    c.model.num_object_slots = 5;
    c.model.slot_dim = 32;
    c.model.feature_dim = 32;
    c.model.projection_dim = 32;
    c.model.encoder_channels = {16, 32, 32};
    c.model.decoder_channels = 16;
    c.data.preset = name;
  } else {
    throw ConfigError("unknown train preset '" + name + "'");
  }
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return train_config_from_json(j);
}

}  // namespace bmod::runner
