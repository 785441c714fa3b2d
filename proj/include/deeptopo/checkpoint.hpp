#pragma once

#include <string>
#include <utility>
#include <vector>

#include "deeptopo/nn.hpp"

namespace deeptopo {

// Single-file checkpoint: a text manifest (format version, config echo and
// the parameter inventory with name/shape/offset/length/checksum) followed
// by one little-endian float32 payload blob in inventory order.
//
//   deeptopo.ckpt.v1
//   config <key> = <value>
//   param <name> <d0,d1,...> <offset> <bytes> <fnv1a64-hex>
//   payload <total-bytes>
//   <raw bytes>

struct CheckpointManifestEntry {
  std::string name;
  std::vector<i64> shape;
  i64 offset = 0;
  i64 bytes = 0;
  std::uint64_t checksum = 0;
};

struct CheckpointInfo {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<CheckpointManifestEntry> params;
};

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store,
                     const std::vector<std::pair<std::string, std::string>>&
                         config_echo);

// Reads only the manifest (no payload), for config recovery and inventory
// checks.
CheckpointInfo read_checkpoint_info(const std::string& path);

// Verifies the full inventory (names, shapes, order, checksums) against the
// store before writing a single value into it.
template <typename T>
void load_checkpoint(const std::string& path, ParamStore<T>& store);

}  // namespace deeptopo
