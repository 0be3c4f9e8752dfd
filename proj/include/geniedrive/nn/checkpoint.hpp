#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>

#include "geniedrive/nn/layers.hpp"

namespace geniedrive::nn {

/// Writes `dir/manifest` (JSON: tensor name -> {dtype, shape, byte_offset,
/// byte_length}, plus caller metadata under "meta") and `dir/weights.bin`
/// (little-endian float32, tensors back to back).
void save_checkpoint(const ParamStore& params, const std::filesystem::path& dir,
                     const nlohmann::json& meta = nlohmann::json::object());

/// Loads values into an already-constructed store. Every tensor in the store
/// must be present with an identical shape; the blob length must equal the sum
/// of declared byte lengths. Returns the "meta" object.
nlohmann::json load_checkpoint(ParamStore& params, const std::filesystem::path& dir);

/// Reads only the "meta" object (to reconstruct a model before loading).
nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir);

}  // namespace geniedrive::nn
