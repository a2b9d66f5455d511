#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/model/model.hpp"
#include "attncal/nd/optim.hpp"

namespace attncal::model {

// Container layout:
//   8 bytes   magic "ATTNCAL1"
//   8 bytes   header length H, little-endian uint64
//   H bytes   JSON header {format_version, kind, config, tensors:[{name, shape, offset}]}
//   blobs     raw little-endian float64, offsets relative to the end of the header
// Loading and re-saving a file reproduces it byte for byte.
inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  std::string kind;  // "model" or "dac"
  nlohmann::json config;
  std::vector<nd::NamedTensor> tensors;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// IoError on missing files, bad magic, truncated blobs or unknown versions.
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace attncal::model
