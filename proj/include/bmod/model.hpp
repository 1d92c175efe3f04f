#pragma once

#include "bmod/nn/ops.hpp"
#include "bmod/nn/tape.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace bmod::model {

struct ModelConfig {
  int image_height = 64;
  int image_width = 96;
  int num_object_slots = 8;  // K
  int slot_dim = 64;
  int feature_dim = 64;      // D', channels of the fused features
  int projection_dim = 64;   // D, channels after the key/query projections
  int downsample_factor = 4;
  // First entry is a stride-1 conv; each further entry halves the resolution,
  // so the list has 1 + log2(downsample_factor) entries.
  std::vector<int> encoder_channels{32, 64, 64};
  int decoder_channels = 32;
  // When false there is no reserved background slot: all K + 1 slots are
  // sampled object slots (motion-guided baseline without background handling).
  bool background_slot = true;
  std::uint64_t seed = 0;

  int num_slots() const { return num_object_slots + 1; }
  int grid_height() const { return image_height / downsample_factor; }
  int grid_width() const { return image_width / downsample_factor; }
  int grid_size() const { return grid_height() * grid_width(); }
  // Column of the first object slot in the attention maps.
  int first_object_slot() const { return background_slot ? 1 : 0; }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Throws ConfigError on violated invariants.
void validate(const ModelConfig& c);

template <typename T>
struct FrameOutput {
  nn::Var<T> slots;           // [B, S, slot_dim], S^t
  nn::Var<T> attention;       // [B, N, S], W^t (softmax over slots, computed from S^{t-1})
  nn::Var<T> reconstruction;  // [B, 3, h, w]
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::vector<nn::Parameter<T>>& parameters() { return params_; }
  const std::vector<nn::Parameter<T>>& parameters() const { return params_; }
  nn::Parameter<T>& parameter(const std::string& name);
  std::size_t parameter_count() const;
  void zero_grad();

  // Parameter handles on a tape. Build once per tape before calling the
  // component functions below.
  struct Bound {
    std::map<std::string, nn::Var<T>> vars;
    const nn::Var<T>& operator[](const std::string& name) const { return vars.at(name); }
  };
  Bound bind(nn::Tape<T>& tape);

  // frame: [B, 3, h, w] -> [B, C, h', w']
  nn::Var<T> encode_frame(const Bound& p, const nn::Var<T>& frame) const;
  // One convGRU update; state [B, D', h', w'].
  nn::Var<T> temporal_step(const Bound& p, const nn::Var<T>& features, const nn::Var<T>& state) const;
  // Runs temporal_step over a sequence starting from `state`; returns H^t per
  // frame and leaves the final state in `state`.
  std::vector<nn::Var<T>> temporal_fuse(const Bound& p, const std::vector<nn::Var<T>>& features,
                                        nn::Var<T>& state) const;
  nn::Var<T> zero_state(nn::Tape<T>& tape, int batch) const;

  // H^t [B, D', h', w'] -> position-embedded, normalized tokens [B, N, D'].
  nn::Var<T> tokens(const Bound& p, const nn::Var<T>& fused) const;

  struct AttentionStep {
    nn::Var<T> slots;      // S^t
    nn::Var<T> attention;  // W^t
  };
  AttentionStep slot_attention_step(const Bound& p, const nn::Var<T>& tokens,
                                    const nn::Var<T>& previous_slots) const;

  nn::Var<T> decode(const Bound& p, const nn::Var<T>& slots, const nn::Var<T>& attention) const;

  // noise: [B, S_sampled, slot_dim] standard normal draws, where S_sampled is
  // K when a background slot is reserved and K + 1 otherwise.
  nn::Var<T> initial_slots(const Bound& p, nn::Tape<T>& tape, int batch, std::span<const T> noise) const;
  int sampled_slots() const { return config_.background_slot ? config_.num_object_slots : config_.num_slots(); }

  // frames: per time step [B, 3, h, w]. Applies encode -> fuse -> attention
  // -> decode per frame, threading slot and recurrent state from zero.
  std::vector<FrameOutput<T>> forward_sequence(const Bound& p, nn::Tape<T>& tape,
                                               const std::vector<nn::Var<T>>& frames,
                                               const nn::Var<T>& initial) const;

 private:
  ModelConfig config_;
  std::vector<nn::Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<T> position_grid_;  // [N, 4]

  void add(const std::string& name, nn::Shape shape);
};

// Per-pixel argmax over the S slot columns of one frame's W ([N, S]) at
// (grid_h, grid_w), ties toward the lowest index, nearest-neighbour upsampled
// to (out_h, out_w).
template <typename T>
std::vector<int> predict_segmentation(std::span<const T> attention, int grid_h, int grid_w, int slots,
                                      int out_h, int out_w);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace bmod::model
