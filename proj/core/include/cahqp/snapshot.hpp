#pragma once

// Binary parameter snapshots: "CAHQPSNP", u32 version, u64 manifest length,
// a JSON manifest (tensor names, shapes, payload offsets, config hash,
// free-form metadata), then the little-endian float32 payload.

#include "cahqp/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace cahqp {

inline constexpr std::uint32_t kSnapshotVersion = 1;

struct SnapshotTensor {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::uint64_t offset = 0;  // in float32 elements from the start of the payload
};

struct SnapshotInfo {
  std::uint32_t version = kSnapshotVersion;
  std::uint64_t config_hash = 0;
  std::map<std::string, std::string> metadata;
  std::vector<SnapshotTensor> tensors;
};

void save_snapshot(const std::filesystem::path& path, const ParameterList& params, std::uint64_t config_hash,
                   const std::map<std::string, std::string>& metadata = {});

SnapshotInfo read_snapshot_info(const std::filesystem::path& path);

// Loads values into existing parameters; names and shapes must match exactly,
// and so must the config hash unless expected_hash is 0.
SnapshotInfo load_snapshot(const std::filesystem::path& path, const ParameterList& into,
                           std::uint64_t expected_hash = 0);

}  // namespace cahqp
