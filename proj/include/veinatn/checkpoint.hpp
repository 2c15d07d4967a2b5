// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "veinatn/imageproc.hpp"
#include "veinatn/model.hpp"

namespace veinatn {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct TrainingMeta {
  int epoch = 0;               // epoch the parameters come from (1-based, 0 = untrained)
  std::uint64_t seed = 0;
  std::string stream;          // "normal", "enhanced" or empty
  std::vector<double> loss_curve;
  std::vector<double> val_accuracy;
  ClaheParams clahe;           // enhancement used for the enhanced stream

  friend bool operator==(const TrainingMeta& a, const TrainingMeta& b) {
    return a.epoch == b.epoch && a.seed == b.seed && a.stream == b.stream && a.loss_curve == b.loss_curve &&
           a.val_accuracy == b.val_accuracy && a.clahe.tiles_x == b.clahe.tiles_x &&
           a.clahe.tiles_y == b.clahe.tiles_y && a.clahe.clip_limit == b.clahe.clip_limit;
  }
};

struct Checkpoint {
  Model model;
  TrainingMeta meta;
};

// Container layout (all integers little-endian):
//   "VANN" | u16 version | u32 n | n bytes key=value text (model config and
//   meta.* keys) | u32 tensor count | per tensor: u16 name length, name,
//   u8 rank, u32 extents[rank], f32 data | u64 FNV-1a of all prior bytes.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t hash_file(const std::filesystem::path& path);

}  // namespace veinatn
