#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "advshape/nn.hpp"

namespace advshape {

/// Container layout:
///   8 bytes  magic "ADVSHPCK"
///   u32      format version (1)
///   u64      header length in bytes
///   header   UTF-8 JSON; "params" lists {name, rows, cols} in block order
///   blocks   row-major little-endian float32 values per parameter
struct Checkpoint {
  nlohmann::json header;
  nn::ParamStore params;
};

inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'V', 'S', 'H', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, nlohmann::json header, const nn::ParamStore& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Lower-case hex SHA-256 of a file's bytes.
std::string file_digest(const std::filesystem::path& path);
std::string sha256_hex(const std::string& bytes);

}  // namespace advshape
