#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hydet/config.hpp"
#include "hydet/model.hpp"

namespace hydet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Container layout (little-endian):
///   "HYDETCKP" | u32 version | u64 header bytes | u64 payload bytes |
///   u32 crc32(header + payload) | header text | float32 payload
/// The header holds [config], [meta] and [tensors] sections; each tensor
/// line is "role name offset ndim dims..." with role param, buffer or
/// momentum and offset counted in floats.
struct CheckpointInfo {
  ModelConfig config;
  KeyValueConfig meta;  // epoch, seed, metric history, ...
  std::vector<std::vector<float>> momentum;  // optimizer state, parameter order
};

void save_checkpoint(const std::string& path, Detector<float>& model, const KeyValueConfig& meta = {},
                     const std::vector<std::vector<float>>* momentum = nullptr);

/// Builds a model from the embedded config and fills it.
std::unique_ptr<Detector<float>> load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr);

/// Fills an existing model; its config must equal the embedded one.
void load_weights(const std::string& path, Detector<float>& model, CheckpointInfo* info = nullptr);

/// Reads and verifies only the container and header.
CheckpointInfo read_checkpoint_info(const std::string& path);

}  // namespace hydet
