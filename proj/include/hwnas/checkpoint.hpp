#pragma once

// Checkpoint container (little-endian):
//
//   bytes 0..7   magic "HWNASCKP"
//   u32          format version (1)
//   u32          entry count
//   per entry:
//     u8         kind: 0 = parameter, 1 = buffer
//     u32        name length, then the name bytes (no terminator)
//     u32        rank, then rank x i32 extents
//     u8         element width in bytes: 4 (binary32) or 8 (binary64)
//     u64        element count
//     count x width bytes of IEEE-754 values
//
// Values are written at the width of the build's Real type; loading a
// checkpoint of the other width converts element-wise.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hwnas/nn.hpp"

namespace hwnas {

struct CheckpointEntry {
  std::uint8_t kind = 0;
  std::string name;
  Shape shape;
  std::uint8_t width = sizeof(Real);
  std::vector<std::uint8_t> payload;  // raw little-endian element bytes
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;
};

Checkpoint to_checkpoint(const StateDict& sd);
// Every entry of `sd` must be present in `ck` with a matching element count.
void apply_checkpoint(const Checkpoint& ck, StateDict& sd);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_state(const std::filesystem::path& path, const StateDict& sd);
void load_state(const std::filesystem::path& path, StateDict& sd);

}  // namespace hwnas
