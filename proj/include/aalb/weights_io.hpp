#pragma once

// Flat binary weights file: the 5-byte magic "AALB1", the model config and
// per-layer head modes as little-endian 64-bit integers, then every weight
// tensor as little-endian float64 in declaration order.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "aalb/model.hpp"

namespace aalb {

std::vector<std::uint8_t> serialize_weights(const Weights& weights);
/// Throws aalb::InputError on a bad magic, truncated payload or trailing bytes.
Weights deserialize_weights(const std::vector<std::uint8_t>& bytes);

void save_weights(const Weights& weights, const std::filesystem::path& path);
Weights load_weights(const std::filesystem::path& path);

}  // namespace aalb
