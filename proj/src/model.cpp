#include "bmod/model.hpp"

#include "bmod/error.hpp"
#include "bmod/rng.hpp"

#include <cmath>

namespace bmod::model {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_height", c.image_height},
                     {"image_width", c.image_width},
                     {"num_object_slots", c.num_object_slots},
                     {"slot_dim", c.slot_dim},
                     {"feature_dim", c.feature_dim},
                     {"projection_dim", c.projection_dim},
                     {"downsample_factor", c.downsample_factor},
                     {"encoder_channels", c.encoder_channels},
                     {"decoder_channels", c.decoder_channels},
                     {"background_slot", c.background_slot},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("image_height").get_to(c.image_height);
  j.at("image_width").get_to(c.image_width);
  j.at("num_object_slots").get_to(c.num_object_slots);
  j.at("slot_dim").get_to(c.slot_dim);
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("projection_dim").get_to(c.projection_dim);
  j.at("downsample_factor").get_to(c.downsample_factor);
  j.at("encoder_channels").get_to(c.encoder_channels);
  j.at("decoder_channels").get_to(c.decoder_channels);
  j.at("background_slot").get_to(c.background_slot);
  j.at("seed").get_to(c.seed);
}

namespace {

int log2_exact(int v) {
  int k = 0;
  while ((1 << k) < v) ++k;
  return (1 << k) == v ? k : -1;
}

}  // namespace

void validate(const ModelConfig& c) {
  if (c.num_object_slots < 0 || (c.background_slot && c.num_object_slots < 1))
    throw ConfigError("num_object_slots must be >= 1");
  if (c.slot_dim <= 0 || c.feature_dim <= 0 || c.projection_dim <= 0 || c.decoder_channels <= 0)
    throw ConfigError("model dimensions must be positive");
  const int levels = log2_exact(c.downsample_factor);
  if (levels < 0) throw ConfigError("downsample_factor must be a power of two");
  if (c.image_height <= 0 || c.image_width <= 0 || c.image_height % c.downsample_factor != 0 ||
      c.image_width % c.downsample_factor != 0)
    throw ConfigError("downsample_factor must divide the image height and width");
  if (static_cast<int>(c.encoder_channels.size()) != levels + 1)
    throw ConfigError("encoder_channels needs 1 + log2(downsample_factor) entries");
  for (int ch : c.encoder_channels)
    if (ch <= 0) throw ConfigError("encoder_channels must be positive");
}

template <typename T>
void Model<T>::add(const std::string& name, nn::Shape shape) {
  index_[name] = params_.size();
  params_.emplace_back(name, std::move(shape));
}

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  validate(config_);
  const auto& enc = config_.encoder_channels;
  int in = 3;
  for (std::size_t i = 0; i < enc.size(); ++i) {
    add("enc" + std::to_string(i) + ".w", {enc[i], in, 3, 3});
    add("enc" + std::to_string(i) + ".b", {enc[i]});
    in = enc[i];
  }
  const int fd = config_.feature_dim;
  add("gru.gates.w", {2 * fd, in + fd, 3, 3});
  add("gru.gates.b", {2 * fd});
  add("gru.cand.w", {fd, in + fd, 3, 3});
  add("gru.cand.b", {fd});
  add("pos.w", {4, fd});
  add("pos.b", {fd});
  add("feat_norm.gain", {fd});
  add("feat_norm.offset", {fd});
  add("mlp1.w", {fd, fd});
  add("mlp1.b", {fd});
  add("mlp2.w", {fd, fd});
  add("mlp2.b", {fd});
  add("token_norm.gain", {fd});
  add("token_norm.offset", {fd});
  add("proj_k.w", {fd, config_.projection_dim});
  add("proj_k.b", {config_.projection_dim});
  add("proj_v.w", {fd, config_.slot_dim});
  add("proj_v.b", {config_.slot_dim});
  add("proj_q.w", {config_.slot_dim, config_.projection_dim});
  add("proj_q.b", {config_.projection_dim});
  add("slot_norm.gain", {config_.slot_dim});
  add("slot_norm.offset", {config_.slot_dim});
  if (config_.background_slot) add("slots.background", {config_.slot_dim});
  add("slots.mean", {config_.slot_dim});
  add("slots.log_std", {config_.slot_dim});
  const int dc = config_.decoder_channels;
  add("dec0.w", {dc, config_.slot_dim, 3, 3});
  add("dec0.b", {dc});
  const int levels = static_cast<int>(enc.size()) - 1;
  for (int i = 1; i <= levels; ++i) {
    add("dec" + std::to_string(i) + ".w", {dc, dc, 3, 3});
    add("dec" + std::to_string(i) + ".b", {dc});
  }
  add("dec_out.w", {3, dc, 3, 3});
  add("dec_out.b", {3});

  Rng rng(derive_seed(config_.seed, 0x6d6f64656cULL));
  for (auto& p : params_) {
    const std::string& n = p.name;
    auto ends = [&](const char* s) {
      const std::string suf(s);
      return n.size() >= suf.size() && n.compare(n.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends(".gain")) {
      std::fill(p.value.begin(), p.value.end(), T(1));
    } else if (ends(".b") || ends(".offset") || ends("log_std")) {
      std::fill(p.value.begin(), p.value.end(), T(0));
    } else if (n == "slots.mean" || n == "slots.background") {
      for (auto& v : p.value) v = static_cast<T>(rng.normal());
    } else {
      // weights: He-style for conv/linear; fan_in from all but the output axis
      const int fan_in = p.shape.size() == 4 ? p.shape[1] * p.shape[2] * p.shape[3] : p.shape[0];
      const double stdv = std::sqrt(2.0 / fan_in) * (n == "dec_out.w" ? 0.5 : 1.0);
      for (auto& v : p.value) v = static_cast<T>(stdv * rng.normal());
    }
  }

  const int gh = config_.grid_height(), gw = config_.grid_width();
  position_grid_.resize(static_cast<std::size_t>(gh) * gw * 4);
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x) {
      const T fy = gh > 1 ? T(y) / T(gh - 1) : T(0);
      const T fx = gw > 1 ? T(x) / T(gw - 1) : T(0);
      T* g = position_grid_.data() + (static_cast<std::size_t>(y) * gw + x) * 4;
      g[0] = fy;
      g[1] = fx;
      g[2] = T(1) - fy;
      g[3] = T(1) - fx;
    }
}

template <typename T>
nn::Parameter<T>& Model<T>::parameter(const std::string& name) {
  return params_.at(index_.at(name));
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
typename Model<T>::Bound Model<T>::bind(nn::Tape<T>& tape) {
  Bound b;
  for (auto& p : params_) b.vars.emplace(p.name, tape.param(p));
  return b;
}

template <typename T>
nn::Var<T> Model<T>::encode_frame(const Bound& p, const nn::Var<T>& frame) const {
  const auto& s = frame.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != config_.image_height || s[3] != config_.image_width)
    throw ConfigError("encode_frame: expected [B,3," + std::to_string(config_.image_height) + "," +
                      std::to_string(config_.image_width) + "], got " + nn::shape_string(s));
  nn::Var<T> x = frame;
  for (std::size_t i = 0; i < config_.encoder_channels.size(); ++i) {
    const std::string id = "enc" + std::to_string(i);
    x = nn::relu(nn::conv2d(x, p[id + ".w"], p[id + ".b"], i == 0 ? 1 : 2, 1));
  }
  return x;
}

template <typename T>
nn::Var<T> Model<T>::zero_state(nn::Tape<T>& tape, int batch) const {
  const int fd = config_.feature_dim;
  return tape.constant({batch, fd, config_.grid_height(), config_.grid_width()},
                       std::vector<T>(static_cast<std::size_t>(batch) * fd * config_.grid_size(), T(0)));
}

template <typename T>
nn::Var<T> Model<T>::temporal_step(const Bound& p, const nn::Var<T>& features, const nn::Var<T>& state) const {
  const int fd = config_.feature_dim;
  auto gates = nn::sigmoid(nn::conv2d(nn::concat_channels(features, state), p["gru.gates.w"], p["gru.gates.b"], 1, 1));
  auto update = nn::slice_channels(gates, 0, fd);
  auto reset = nn::slice_channels(gates, fd, fd);
  auto candidate = nn::tanh(nn::conv2d(nn::concat_channels(features, nn::mul(reset, state)), p["gru.cand.w"],
                                       p["gru.cand.b"], 1, 1));
  // h' = h + z * (n - h)
  return nn::add(state, nn::mul(update, nn::sub(candidate, state)));
}

template <typename T>
std::vector<nn::Var<T>> Model<T>::temporal_fuse(const Bound& p, const std::vector<nn::Var<T>>& features,
                                                nn::Var<T>& state) const {
  std::vector<nn::Var<T>> out;
  out.reserve(features.size());
  for (const auto& f : features) {
    state = temporal_step(p, f, state);
    out.push_back(state);
  }
  return out;
}

template <typename T>
nn::Var<T> Model<T>::tokens(const Bound& p, const nn::Var<T>& fused) const {
  nn::Tape<T>& tape = *fused.tape;
  const int n = config_.grid_size();
  auto grid = tape.constant({n, 4}, position_grid_);
  auto pos = nn::linear(grid, p["pos.w"], p["pos.b"]);
  auto x = nn::add_rows(nn::to_tokens(fused), pos);
  x = nn::layer_norm(x, p["feat_norm.gain"], p["feat_norm.offset"]);
  x = nn::linear(nn::relu(nn::linear(x, p["mlp1.w"], p["mlp1.b"])), p["mlp2.w"], p["mlp2.b"]);
  return nn::layer_norm(x, p["token_norm.gain"], p["token_norm.offset"]);
}

template <typename T>
typename Model<T>::AttentionStep Model<T>::slot_attention_step(const Bound& p, const nn::Var<T>& tokens,
                                                               const nn::Var<T>& previous_slots) const {
  auto keys = nn::linear(tokens, p["proj_k.w"], p["proj_k.b"]);
  auto values = nn::linear(tokens, p["proj_v.w"], p["proj_v.b"]);
  auto queries = nn::linear(nn::layer_norm(previous_slots, p["slot_norm.gain"], p["slot_norm.offset"]),
                            p["proj_q.w"], p["proj_q.b"]);
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(config_.projection_dim));
  auto logits = nn::scale(nn::bmm(keys, queries, false, true), inv_sqrt_d);  // [B, N, S]
  auto attention = nn::softmax_last(logits);
  auto weights = nn::normalize_over_positions(attention, T(1e-8));
  auto slots = nn::bmm(weights, values, true, false);  // [B, S, slot_dim]
  return {slots, attention};
}

template <typename T>
nn::Var<T> Model<T>::decode(const Bound& p, const nn::Var<T>& slots, const nn::Var<T>& attention) const {
  auto mixture = nn::bmm(attention, slots, false, false);  // [B, N, slot_dim]
  auto x = nn::from_tokens(mixture, config_.grid_height(), config_.grid_width());
  x = nn::relu(nn::conv2d(x, p["dec0.w"], p["dec0.b"], 1, 1));
  const int levels = static_cast<int>(config_.encoder_channels.size()) - 1;
  for (int i = 1; i <= levels; ++i) {
    const std::string id = "dec" + std::to_string(i);
    x = nn::relu(nn::conv2d(nn::upsample_nearest(x, 2), p[id + ".w"], p[id + ".b"], 1, 1));
  }
  return nn::conv2d(x, p["dec_out.w"], p["dec_out.b"], 1, 1);
}

template <typename T>
nn::Var<T> Model<T>::initial_slots(const Bound& p, nn::Tape<T>& tape, int batch, std::span<const T> noise) const {
  const int sampled = sampled_slots();
  if (noise.size() != static_cast<std::size_t>(batch) * sampled * config_.slot_dim)
    throw ConfigError("initial_slots: noise has wrong size");
  auto nz = tape.constant({batch, sampled, config_.slot_dim}, std::vector<T>(noise.begin(), noise.end()));
  nn::Var<T> bg;
  if (config_.background_slot) bg = p["slots.background"];
  return nn::slot_init(bg, p["slots.mean"], p["slots.log_std"], nz);
}

template <typename T>
std::vector<FrameOutput<T>> Model<T>::forward_sequence(const Bound& p, nn::Tape<T>& tape,
                                                       const std::vector<nn::Var<T>>& frames,
                                                       const nn::Var<T>& initial) const {
  if (frames.empty()) throw ConfigError("forward_sequence: needs at least one frame");
  const int batch = frames.front().shape()[0];
  std::vector<nn::Var<T>> features;
  features.reserve(frames.size());
  for (const auto& f : frames) features.push_back(encode_frame(p, f));
  nn::Var<T> state = zero_state(tape, batch);
  const auto fused = temporal_fuse(p, features, state);
  std::vector<FrameOutput<T>> out;
  nn::Var<T> slots = initial;
  for (const auto& h : fused) {
    auto step = slot_attention_step(p, tokens(p, h), slots);
    slots = step.slots;
    out.push_back({step.slots, step.attention, decode(p, step.slots, step.attention)});
  }
  return out;
}

template <typename T>
std::vector<int> predict_segmentation(std::span<const T> attention, int grid_h, int grid_w, int slots,
                                      int out_h, int out_w) {
  if (attention.size() != static_cast<std::size_t>(grid_h) * grid_w * slots)
    throw std::invalid_argument("predict_segmentation: attention size mismatch");
  std::vector<int> grid(static_cast<std::size_t>(grid_h) * grid_w);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const T* row = attention.data() + i * slots;
    int best = 0;
    for (int s = 1; s < slots; ++s)
      if (row[s] > row[best]) best = s;
    grid[i] = best;
  }
  std::vector<int> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const int gy = static_cast<int>(static_cast<long>(y) * grid_h / out_h);
      const int gx = static_cast<int>(static_cast<long>(x) * grid_w / out_w);
      out[static_cast<std::size_t>(y) * out_w + x] = grid[static_cast<std::size_t>(gy) * grid_w + gx];
    }
  return out;
}

template class Model<float>;
template class Model<double>;
template std::vector<int> predict_segmentation<float>(std::span<const float>, int, int, int, int, int);
template std::vector<int> predict_segmentation<double>(std::span<const double>, int, int, int, int, int);

}  // namespace bmod::model
