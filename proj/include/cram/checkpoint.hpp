#pragma once

#include <cstdint>
#include <string>

#include "cram/model.hpp"

namespace cram {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary container: magic, format version, a JSON header with the model
// config, then the raw little-endian parameter doubles.
void save_checkpoint(const Model& model, const std::string& path);

// Throws IoError for unreadable or truncated files and for a version mismatch.
Model load_checkpoint(const std::string& path);

}  // namespace cram
