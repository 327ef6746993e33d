#pragma once

// Binary checkpoint files, little-endian:
//   "DCKP", u32 version (1)
//   u32 model-name length, name bytes, u32 epoch, u64 config hash, u64 seed
//   u32 entry count, then per entry:
//     u32 name length, name bytes, u8 rank, rank × u32 dims, f32 payload

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "layers.hpp"

namespace vidistill::io {

// Model names accepted in checkpoint metadata: the three networks plus
// "features" for exported feature tables.
inline constexpr std::string_view kFeatureTableName = "features";
bool known_model_name(std::string_view name);

struct CheckpointMeta {
  std::string model;
  std::uint32_t epoch = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  CheckpointMeta meta;
  nn::NamedTensors<float> entries;

  const Tensor& at(std::string_view name) const;
  const Tensor* find(std::string_view name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Parameters followed by buffers, sharing storage with the model.
nn::NamedTensors<float> flatten(const nn::ParameterSet<float>& state);

// Copies matching entries into `target` by name. Every target tensor must be
// present with the same shape; extra checkpoint entries are ignored only when
// their names start with one of `ignored_prefixes`.
void assign_state(const nn::ParameterSet<float>& target, const Checkpoint& checkpoint,
                  std::initializer_list<std::string_view> ignored_prefixes = {});

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);
std::uint64_t file_hash(const std::filesystem::path& path);
std::uint64_t state_hash(const nn::ParameterSet<float>& state);

}  // namespace vidistill::io
