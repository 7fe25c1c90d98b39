#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "pccforge/nn.hpp"

namespace pccforge {

inline constexpr const char* kCheckpointMagic = "PCCFORGE-CKPT-v1";

/// Named arrays plus string metadata (model kind, architecture, step count).
///
/// Layout: the magic line, then a u64 metadata count with (key, value) strings, then a
/// u64 array count with (name, rows, cols, row-major f64 values). Integers are u64 and
/// floats IEEE-754 binary64, both little-endian; strings are u64 length + bytes.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  ParamStore params;

  const std::string& meta(const std::string& key) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pccforge
