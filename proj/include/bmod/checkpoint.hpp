#pragma once

#include "bmod/model.hpp"

#include <cstdint>
#include <filesystem>

namespace bmod::model {

// Binary layout: 8-byte magic "BMODCKPT", uint64 little-endian header length,
// UTF-8 JSON header {format_version, config, step, parameters: [{name, shape}]},
// then every parameter as little-endian float32 in manifest order.
struct CheckpointInfo {
  ModelConfig config;
  std::int64_t step = 0;
  nlohmann::json extra;  // free-form metadata (training config echo, etc.)
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, std::int64_t step,
                     const nlohmann::json& extra = nlohmann::json::object());

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Builds a model from the stored config and loads its parameters.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

}  // namespace bmod::model
