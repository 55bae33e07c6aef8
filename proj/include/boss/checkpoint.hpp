#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "boss/tensor.hpp"

namespace boss {

/// A named group of tensors inside a checkpoint, e.g. "online/L0/m1".
struct StoreRef {
  std::string prefix;
  ParameterStore* store;
};

struct CheckpointData {
  nlohmann::json meta;
  std::map<std::string, Tensor> tensors;  // full ids: "<prefix>/<param>" and "<prefix>/#<buffer>"
};

/// Writes <stem>.json (manifest "v1": ids, shapes, byte offsets) and
/// <stem>.bin (little-endian float64 in manifest order).
void save_checkpoint(const std::filesystem::path& stem, const std::vector<StoreRef>& stores,
                     const nlohmann::json& meta = nlohmann::json::object());

CheckpointData load_checkpoint(const std::filesystem::path& manifest);

/// Copies tensors back into stores; every parameter and buffer must be
/// present with a matching shape.
void restore_checkpoint(const CheckpointData& data, const std::vector<StoreRef>& stores);

}  // namespace boss
