#pragma once

// Soft-target distillation from frame-level teachers to clip-level students.
//
// A clip's target comes from a handful of its frames: the teacher logits of
// the picked frames are averaged, then passed through a temperature softmax.
// Students are trained against those targets with soft cross-entropy (or
// squared error on logits), summed over teachers with per-teacher weights.
// Clips whose target entropy is not below a threshold get zero loss weight.

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tensor.hpp"

namespace vidistill::distill {

enum class PickKind { kCenter, kRandom, kRandomSubset };

struct PickStrategy {
  PickKind kind = PickKind::kCenter;
  std::size_t count = 1;  // frames drawn by kRandomSubset
};

// "center", "random", or "k-random" (count supplied separately).
PickStrategy parse_pick_strategy(std::string_view name, std::size_t count = 1);
std::string pick_strategy_name(const PickStrategy& strategy);

// center: floor((T−1)/2). random: one uniform index. k-random: `count`
// distinct indices, uniform over subsets, in increasing order.
std::vector<std::size_t> pick_frames(std::size_t frames, const PickStrategy& strategy,
                                     std::mt19937_64& rng);

struct SoftTarget {
  std::vector<double> probs;
  double entropy = 0.0;  // nats
};

double entropy(std::span<const double> probs);

// rows: n×K teacher logits for one clip, row-major.
SoftTarget make_target(std::span<const double> rows, std::size_t classes, double tau);
template <typename T>
SoftTarget make_target(const BasicTensor<T>& rows, double tau);

// Column means of each consecutive group of `rows_per_clip` rows:
// [clips·n × K] -> [clips × K].
Tensor average_logits(const Tensor& frame_logits, std::size_t rows_per_clip);

enum class LossKind { kCrossEntropy, kMseLogits };
LossKind parse_loss_kind(std::string_view name);
std::string_view loss_kind_name(LossKind kind);

// Mean over the batch of −Σ_k y_k·ln softmax(z)_k.
Tensor soft_target_loss(const Tensor& student_logits, const Tensor& targets,
                        std::span<const double> row_weights = {});
// Mean over batch and classes of (z − t)².
Tensor mse_logit_loss(const Tensor& student_logits, const Tensor& target_logits,
                      std::span<const double> row_weights = {});

// Σ_i weight_i · loss_i.
Tensor multi_teacher_loss(std::span<const Tensor> losses, std::span<const double> weights);

struct FilterResult {
  std::vector<double> weights;  // 1 kept, 0 dropped
  std::size_t kept = 0;
  std::size_t dropped = 0;
};

// Keeps a target iff its entropy is strictly below the threshold; no
// threshold keeps everything.
FilterResult entropy_filter(std::span<const SoftTarget> targets, std::optional<double> threshold);

}  // namespace vidistill::distill
