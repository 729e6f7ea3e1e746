#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "grouptr/tensor.hpp"

namespace grouptr {

/// One named float32 array of a "GTCK" checkpoint file.
struct CheckpointEntry {
  std::string name;
  nn::Shape dims;
  std::vector<float> data;

  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

// Throws IoError when the file cannot be written or read and ValidationError on
// malformed content (bad magic, truncation, duplicate names, trailing bytes).
void save_checkpoint(const std::vector<CheckpointEntry>& entries, const std::filesystem::path& path);
std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path);

}  // namespace grouptr
