#include "distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "error.hpp"
#include "ops.hpp"

namespace vidistill::distill {

PickStrategy parse_pick_strategy(std::string_view name, std::size_t count) {
  if (name == "center") return {PickKind::kCenter, 1};
  if (name == "random") return {PickKind::kRandom, 1};
  if (name == "k-random") {
    if (count == 0) usage_error("k-random needs a positive frame count");
    return {PickKind::kRandomSubset, count};
  }
  usage_error("unknown pick strategy '", name, "' (expected center, random or k-random)");
}

std::string pick_strategy_name(const PickStrategy& strategy) {
  switch (strategy.kind) {
    case PickKind::kCenter:
      return "center";
    case PickKind::kRandom:
      return "random";
    case PickKind::kRandomSubset:
      return "k-random";
  }
  return "center";
}

std::vector<std::size_t> pick_frames(std::size_t frames, const PickStrategy& strategy,
                                     std::mt19937_64& rng) {
  if (frames == 0) usage_error("cannot pick frames from an empty clip");
  switch (strategy.kind) {
    case PickKind::kCenter:
      return {(frames - 1) / 2};
    case PickKind::kRandom: {
      std::uniform_int_distribution<std::size_t> dist(0, frames - 1);
      return {dist(rng)};
    }
    case PickKind::kRandomSubset: {
      if (strategy.count > frames) {
        usage_error("cannot pick ", strategy.count, " distinct frames from a clip of ", frames);
      }
      std::vector<std::size_t> idx(frames);
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t i = 0; i < strategy.count; ++i) {
        std::uniform_int_distribution<std::size_t> dist(i, frames - 1);
        std::swap(idx[i], idx[dist(rng)]);
      }
      idx.resize(strategy.count);
      std::sort(idx.begin(), idx.end());
      return idx;
    }
  }
  return {};
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

SoftTarget make_target(std::span<const double> rows, std::size_t classes, double tau) {
  if (!(tau > 0.0)) usage_error("temperature must be positive, got ", tau);
  if (classes == 0 || rows.empty() || rows.size() % classes != 0) {
    usage_error("make_target needs at least one row of ", classes, " logits");
  }
  const std::size_t n = rows.size() / classes;
  std::vector<double> avg(classes, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < classes; ++k) {
      const double v = rows[r * classes + k];
      if (!std::isfinite(v)) numerical_error("non-finite teacher logit in row ", r);
      avg[k] += v;
    }
  double mx = -std::numeric_limits<double>::infinity();
  for (auto& v : avg) {
    v = v / static_cast<double>(n) / tau;
    mx = std::max(mx, v);
  }
  SoftTarget t;
  t.probs.resize(classes);
  double s = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    t.probs[k] = std::exp(avg[k] - mx);
    s += t.probs[k];
  }
  for (auto& p : t.probs) p /= s;
  t.entropy = entropy(t.probs);
  return t;
}

template <typename T>
SoftTarget make_target(const BasicTensor<T>& rows, double tau) {
  if (rows.rank() != 2) usage_error("make_target expects [n×K] logits, got ", shape_str(rows.shape()));
  std::vector<double> v(rows.data().begin(), rows.data().end());
  return make_target(v, rows.dim(1), tau);
}

template SoftTarget make_target<float>(const BasicTensor<float>&, double);
template SoftTarget make_target<double>(const BasicTensor<double>&, double);

Tensor average_logits(const Tensor& frame_logits, std::size_t rows_per_clip) {
  if (frame_logits.rank() != 2 || rows_per_clip == 0 || frame_logits.dim(0) % rows_per_clip != 0) {
    usage_error("cannot group ", shape_str(frame_logits.shape()), " into clips of ", rows_per_clip,
                " rows");
  }
  const std::size_t clips = frame_logits.dim(0) / rows_per_clip, k = frame_logits.dim(1);
  const auto v = frame_logits.data();
  std::vector<float> out(clips * k);
  for (std::size_t c = 0; c < clips; ++c)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < rows_per_clip; ++r) s += v[(c * rows_per_clip + r) * k + j];
      out[c * k + j] = static_cast<float>(s / static_cast<double>(rows_per_clip));
    }
  return Tensor({clips, k}, std::move(out));
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "cross-entropy") return LossKind::kCrossEntropy;
  if (name == "mse-logits") return LossKind::kMseLogits;
  usage_error("unknown distillation loss '", name, "' (expected cross-entropy or mse-logits)");
}

std::string_view loss_kind_name(LossKind kind) {
  return kind == LossKind::kCrossEntropy ? "cross-entropy" : "mse-logits";
}

Tensor soft_target_loss(const Tensor& student_logits, const Tensor& targets,
                        std::span<const double> row_weights) {
  return ops::soft_cross_entropy(student_logits, targets, row_weights);
}

Tensor mse_logit_loss(const Tensor& student_logits, const Tensor& target_logits,
                      std::span<const double> row_weights) {
  return ops::mse(student_logits, target_logits, row_weights);
}

Tensor multi_teacher_loss(std::span<const Tensor> losses, std::span<const double> weights) {
  if (losses.empty()) usage_error("multi-teacher loss needs at least one teacher");
  if (weights.size() != losses.size()) {
    usage_error(losses.size(), " teacher losses but ", weights.size(), " weights");
  }
  for (double w : weights)
    if (!(w >= 0.0) || !std::isfinite(w)) usage_error("teacher weights must be finite and >= 0");
  Tensor total = ops::scale(losses[0], static_cast<float>(weights[0]));
  for (std::size_t i = 1; i < losses.size(); ++i)
    total = ops::add(total, ops::scale(losses[i], static_cast<float>(weights[i])));
  return total;
}

FilterResult entropy_filter(std::span<const SoftTarget> targets, std::optional<double> threshold) {
  FilterResult r;
  r.weights.reserve(targets.size());
  for (const auto& t : targets) {
    const bool keep = !threshold || t.entropy < *threshold;
    r.weights.push_back(keep ? 1.0 : 0.0);
    (keep ? r.kept : r.dropped) += 1;
  }
  return r;
}

}  // namespace vidistill::distill
