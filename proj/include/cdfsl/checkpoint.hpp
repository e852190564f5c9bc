#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cdfsl/tensor.hpp"

namespace cdfsl {

// On-disk parameter snapshot. Layout (little-endian):
//   magic "CDFV", u32 format version, u64 config digest,
//   u32 stage-tag length + bytes, u32 epoch, u32 tensor count,
//   then per tensor: u32 name length + bytes, u32 rank, u64 dims, raw f64 data.
// Round-trips are bit-exact.
struct Checkpoint {
  std::uint32_t version = 1;
  std::uint64_t config_digest = 0;
  std::string stage;
  std::uint32_t epoch = 0;
  ModelParams params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cdfsl
