#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convcut/layers.hpp"
#include "convcut/model.hpp"

namespace convcut {

// CCUT archive, all integers little-endian:
//   "CCUT" | u32 version=1 | u32 count |
//   count x (u32 name_len | name bytes | u32 rank | rank x u32 dim | f32 data)
// Entries are written in sorted-name order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void save_checkpoint(const ParameterList& params, const std::filesystem::path& path);
void save_checkpoint(const ConvCutModel& model, const std::filesystem::path& path);

// Parses and validates the whole file. Throws LoadError on bad magic,
// version, duplicate names, or truncation.
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> uninitialized;  // model parameters absent from the file
  std::vector<std::string> unexpected;     // file entries the model does not have
  std::vector<std::string> shape_mismatch;
};

// Copies entries whose names and shapes match. In strict mode any missing,
// extra, or mismatched entry raises LoadError and the model is untouched.
LoadReport load_checkpoint(const std::filesystem::path& path, ConvCutModel& model, bool strict);

}  // namespace convcut
