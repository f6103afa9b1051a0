#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "mslae/network.hpp"

namespace mslae {

inline constexpr uint32_t kCheckpointVersion = 1;

/// Optional payload stored next to the model: free-form metadata plus named
/// tensors (optimizer moments when resuming).
struct CheckpointExtras {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;
};

/// Layout (all integers little-endian):
///   "MSLAECKP" | u32 version | u32 n + n bytes JSON header | u32 record count |
///   records: u8 kind | u32 n + name | 4 x u32 dims (N,C,H,W) | float32 data
/// Kinds: 0 parameter, 1 BN running mean, 2 BN running variance, 3 extra.
/// The file is written to a temporary name and renamed into place.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path,
                     const CheckpointExtras* extras = nullptr);

/// Fully validates the file before returning; on any error nothing is
/// modified and a CheckpointError with a specific kind is thrown.
ModelState load_checkpoint(const std::filesystem::path& path, CheckpointExtras* extras = nullptr);

/// As above, but the stored configuration must equal `expected`; any
/// difference is reported as a shape mismatch listing the differing fields.
ModelState load_checkpoint(const std::filesystem::path& path, const NetworkConfig& expected,
                           CheckpointExtras* extras = nullptr);

}  // namespace mslae
