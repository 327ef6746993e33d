#pragma once

// Training and evaluation entry points behind the CLI. Every training run
// writes <out> (checkpoint), <out>.config.json (effective config) and
// <out>.metrics.jsonl (metrics rows).

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "metrics.hpp"
#include "models.hpp"

namespace vidistill::pipeline {

// One summary line per epoch on stderr when enabled (off by default).
void set_verbose(bool verbose);

struct EvalResult {
  std::size_t clips = 0;   // windows evaluated
  std::size_t videos = 0;  // container entries
  std::size_t k = 1;
  double clip_accuracy = 0.0;
  double top1 = 0.0;
  double topk = 0.0;
};

struct TrainResult {
  std::vector<double> epoch_losses;  // mean training loss per epoch
  std::optional<EvalResult> eval;    // held-out evaluation after the last epoch
  std::vector<metrics::Row> rows;
};

std::filesystem::path corpus_path(const config::RunConfig& config, data::Corpus corpus);

void generate_data(const config::RunConfig& config);

// Hard-label 2D classifier on the frames selected by data.teacher_task.
TrainResult train_teacher(const config::RunConfig& config, const std::filesystem::path& out);

// Student trained on distill-videos against soft targets from every teacher
// in distill.teachers, one head per teacher ("teacher0", "teacher1", ...).
TrainResult distill_pretrain(const config::RunConfig& config, const std::filesystem::path& out);

// Writes a res3d student checkpoint whose trunk is inflated from the teacher.
void inflate_checkpoint(const config::RunConfig& config, const std::filesystem::path& teacher,
                        const std::filesystem::path& out, bool scaled);

// Motion-label training on target-actions from run.init / run.init_checkpoint.
TrainResult finetune(const config::RunConfig& config, const std::filesystem::path& out);

// Students: motion labels through the "motion" head (or the only head),
// averaging logits over clips_per_video windows of data.frames frames.
// Teachers: the center frame of each clip against the label slot of
// data.teacher_task.
EvalResult evaluate(const config::RunConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& corpus, std::size_t clips_per_video, std::size_t k);

// Pooled trunk features per clip ("features" [N×D]) plus any labels, written
// as a checkpoint file. Returns N.
std::size_t export_features(const config::RunConfig& config, const std::filesystem::path& checkpoint,
                            const std::filesystem::path& corpus, const std::filesystem::path& out);

struct Ranking {
  double top1 = 0.0;
  double topk = 0.0;
};
// Fractions of rows of `logits` [N×classes] whose label is the top entry and
// among the k top entries, ties broken toward the lower class index.
Ranking rank_accuracy(std::span<const double> logits, std::span<const int> labels, std::size_t classes,
                      std::size_t k);

// Rebuilding networks from checkpoints. Widths come from the stored shapes;
// temporal padding cannot be recovered from shapes and is taken from the
// caller.
nn::ModelConfig infer_model_config(const io::Checkpoint& checkpoint, bool temporal_padding);
std::unique_ptr<nn::TeacherNet2D> load_teacher(const io::Checkpoint& checkpoint);
std::unique_ptr<nn::StudentNet> load_student(const io::Checkpoint& checkpoint, bool temporal_padding);

// [B×C×T×H×W] -> [ΣN×C×H×W] with frames[b] listing the frames taken from clip b.
Tensor gather_frames(const Tensor& clips, const std::vector<std::vector<std::size_t>>& frames);
// [B×C×T×H×W] -> [B×C×length×H×W] starting at `start`.
Tensor clip_window(const Tensor& clips, std::size_t start, std::size_t length);
// Starts of `count` windows of `length` frames spread evenly over `frames`.
std::vector<std::size_t> window_starts(std::size_t frames, std::size_t length, std::size_t count);

}  // namespace vidistill::pipeline
