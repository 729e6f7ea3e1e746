#include "grouptr/checkpoint.hpp"

#include <fstream>
#include <limits>
#include <unordered_set>

#include "binary_io.hpp"
#include "grouptr/errors.hpp"

namespace grouptr {

namespace {

constexpr char kMagic[4] = {'G', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
constexpr const char* kFile = "checkpoint";

}  // namespace

void save_checkpoint(const std::vector<CheckpointEntry>& entries, const std::filesystem::path& path) {
  std::unordered_set<std::string> names;
  for (const auto& e : entries) {
    if (e.name.empty() || e.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ValidationError("checkpoint: invalid entry name length for \"" + e.name + "\"");
    }
    if (e.dims.size() > std::numeric_limits<std::uint8_t>::max()) {
      throw ValidationError("checkpoint: rank too large for " + e.name);
    }
    if (nn::shape_numel(e.dims) != e.data.size()) {
      throw ValidationError("checkpoint: " + e.name + " has " + std::to_string(e.data.size()) +
                            " values for shape " + nn::to_string(e.dims));
    }
    if (!names.insert(e.name).second) throw ValidationError("checkpoint: duplicate entry " + e.name);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  binary::put_u32(out, kVersion);
  binary::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    binary::put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    binary::put_u8(out, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) binary::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.data) binary::put_f32(out, v);
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string where = path.string() + ": ";
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw ValidationError(where + "bad magic, expected GTCK");
  }
  const auto version = binary::get_u32(in, kFile, "version");
  if (version != kVersion) throw ValidationError(where + "unsupported version " + std::to_string(version));
  const auto count = binary::get_u32(in, kFile, "entry count");
  std::vector<CheckpointEntry> entries;
  std::unordered_set<std::string> names;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto len = binary::get_u16(in, kFile, "name length");
    e.name.resize(len);
    if (!in.read(e.name.data(), len)) throw ValidationError(where + "truncated while reading a name");
    if (!names.insert(e.name).second) throw ValidationError(where + "duplicate entry " + e.name);
    const auto rank = binary::get_u8(in, kFile, "rank");
    for (std::uint8_t r = 0; r < rank; ++r) e.dims.push_back(binary::get_u32(in, kFile, "dims"));
    e.data.resize(nn::shape_numel(e.dims));
    for (auto& v : e.data) v = binary::get_f32(in, kFile, "values");
    entries.push_back(std::move(e));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError(where + "trailing bytes after last entry");
  return entries;
}

}  // namespace grouptr
