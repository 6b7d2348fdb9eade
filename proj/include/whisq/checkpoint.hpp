#pragma once

#include <filesystem>
#include <vector>

#include "whisq/config.hpp"
#include "whisq/model.hpp"

namespace whisq {

// Checkpoint container, little-endian throughout:
//   "WQCK" | u32 version (=1) | u32 header_len | header JSON (utf-8)
//   u32 tensor_count
//   per tensor: u32 name_len | name | u32 rank | u32 extent[rank] | f64 payload
// The header holds {"format": "whisq-checkpoint", "version": 1, "config": {...}}.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  WhisqConfig config;
  ModelParams params;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes, const std::string& origin = "<memory>");

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Validates the container and that tensor names/shapes match the config's layout.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace whisq
