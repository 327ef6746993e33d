#pragma once

// Run configuration: a JSON document with sections model, data, optim,
// distill and run. Every key has a default; unknown keys are rejected. The
// optimizer defaults depend on the training phase the config is loaded for.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "data.hpp"
#include "models.hpp"

namespace vidistill::config {

enum class Phase { kGeneric, kTeacher, kDistill, kFinetune };

struct ModelSection {
  std::string name = "r2plus1d-tiny";
  std::size_t in_channels = 1;
  std::size_t width1 = 8;
  std::size_t width2 = 16;
  std::size_t temporal_kernel = 3;
  bool temporal_padding = true;

  nn::ModelConfig model_config() const;
};

struct DataSection {
  std::string dir = "data";
  data::GeneratorConfig generator;
  data::CorpusSizes sizes;
  // Label the 2D classifier is trained on: "appearance" (teacher-images),
  // "scene" (teacher-scenes) or "motion-frames" (single frames of the
  // target-action clips, labelled with their motion class).
  std::string teacher_task = "appearance";
};

struct OptimSection {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_gamma = 0.1;
  std::size_t lr_step_epochs = 10;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;

  static OptimSection defaults_for(Phase phase);
};

struct TeacherRef {
  std::string checkpoint;
  double weight = 1.0;
};

struct DistillSection {
  double tau = 1.0;
  std::string loss = "cross-entropy";
  std::optional<double> entropy_threshold;
  std::vector<TeacherRef> teachers;
  std::string pick_strategy = "center";
  std::size_t pick_count = 2;  // frames for k-random
};

struct RunSection {
  std::uint64_t seed = 0;
  // Finetune initialization: scratch, inflate or distill.
  std::string init = "scratch";
  std::string init_checkpoint;
  bool scaled_inflation = true;
  std::size_t clips_per_video = 1;
  std::size_t topk = 5;
  std::size_t log_every = 10;
  // Evaluate on the held-out split after every epoch.
  bool eval_each_epoch = true;
};

struct RunConfig {
  Phase phase = Phase::kGeneric;
  ModelSection model;
  DataSection data;
  OptimSection optim;
  DistillSection distill;
  RunSection run;

  std::string to_json() const;     // effective config, pretty-printed
  std::uint64_t hash() const;      // FNV-1a of the compact effective config
};

RunConfig defaults(Phase phase);
// Overlays a JSON document on the phase defaults.
RunConfig parse_config(const std::string& text, Phase phase);
RunConfig load_config(const std::filesystem::path& path, Phase phase);
// Phase defaults, overlaid with `path` when non-empty.
RunConfig resolve_config(const std::filesystem::path& path, Phase phase);

void write_effective_config(const RunConfig& config, const std::filesystem::path& checkpoint_path);
std::filesystem::path effective_config_path(const std::filesystem::path& checkpoint_path);

}  // namespace vidistill::config
