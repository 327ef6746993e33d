#pragma once

// Model zoo: a small residual 2D teacher and two spatiotemporal students
// (full 3D and (2+1)D) sharing one residual topology:
//
//   stem:   conv 3×3 (×kt) stride 2 spatial, BN, ReLU            width w1
//   stage1: 2 basic blocks                                       width w1
//   stage2: 2 basic blocks, the first striding 2 spatially       width w2
//   global average pool, then linear head(s)
//
// Parameter names follow <stem|stageN.blockM>.<conv1|bn1|...>.<weight|...>,
// with (2+1)D units adding conv_spatial / mid_bn / conv_temporal.

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "layers.hpp"

namespace vidistill::nn {

enum class ModelKind { kTeacher2d, kRes3d, kR2Plus1d };

std::string_view model_name(ModelKind kind);
// Accepts teacher2d-tiny, res3d-tiny, r2plus1d-tiny.
ModelKind parse_model_name(std::string_view name);

struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t width1 = 8;
  std::size_t width2 = 16;
  std::size_t temporal_kernel = 3;
  // Zero temporal padding keeps T fixed through every block. Without it each
  // kt-wide convolution trims kt−1 frames and shortcuts are center-cropped.
  bool temporal_padding = true;
};

class TeacherNet2D {
 public:
  TeacherNet2D(const ModelConfig& config, std::size_t num_classes);

  // frames: [B×C×H×W]
  Tensor features(const Tensor& frames);
  Tensor logits(const Tensor& frames);

  ParameterSet<float> trunk_state() const;
  ParameterSet<float> state() const;
  void reset_parameters(std::mt19937_64& rng);
  void set_training(bool training);
  bool training() const { return training_; }

  std::size_t num_classes() const { return num_classes_; }
  std::size_t feature_dim() const { return config_.width2; }
  const ModelConfig& config() const { return config_; }

 private:
  struct Block {
    Conv2d<float> conv1;
    BatchNorm<float> bn1;
    Conv2d<float> conv2;
    BatchNorm<float> bn2;
    bool has_downsample = false;
    Conv2d<float> down_conv;
    BatchNorm<float> down_bn;
  };
  Tensor block_forward(Block& b, const Tensor& x);

  ModelConfig config_;
  std::size_t num_classes_;
  Conv2d<float> stem_conv_;
  BatchNorm<float> stem_bn_;
  std::vector<std::pair<std::string, Block>> blocks_;
  Linear<float> head_;
  bool training_ = true;
};

// Teacher inference: requires eval mode, records no graph, mutates nothing.
Tensor teacher_logits(TeacherNet2D& teacher, const Tensor& frames);

// A 3D convolution unit that is either a full kt×kh×kw kernel or its (2+1)D
// factorization.
class SpatioTemporalConv {
 public:
  SpatioTemporalConv() = default;
  SpatioTemporalConv(bool factorized, std::size_t in, std::size_t out, std::size_t kt,
                     std::size_t kh, std::size_t kw, ops::Conv3dGeometry geometry);

  Tensor forward(const Tensor& x);
  void collect(const std::string& prefix, ParameterSet<float>& set) const;
  void reset_parameters(std::mt19937_64& rng);
  void set_training(bool training);

 private:
  std::variant<Conv3d<float>, Conv2Plus1d<float>> impl_;
};

class StudentNet {
 public:
  StudentNet(ModelKind kind, const ModelConfig& config);

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return config_; }
  std::size_t feature_dim() const { return config_.width2; }

  // clips: [B×C×T×H×W] -> pooled trunk features [B×w2]
  Tensor features(const Tensor& clips);
  Tensor forward(const Tensor& clips, const std::string& head);
  // Runs the trunk once and applies each requested head to the same features.
  std::map<std::string, Tensor> forward_heads(const Tensor& clips,
                                              const std::vector<std::string>& heads);
  Tensor apply_head(const Tensor& features, const std::string& head) const;

  void add_head(const std::string& id, std::size_t classes, std::mt19937_64& rng);
  void remove_heads() { heads_.clear(); }
  bool has_head(const std::string& id) const { return heads_.count(id) != 0; }
  std::vector<std::string> head_ids() const;
  std::size_t head_classes(const std::string& id) const;

  ParameterSet<float> trunk_state() const;
  ParameterSet<float> head_state() const;
  ParameterSet<float> state() const;
  void reset_parameters(std::mt19937_64& rng);
  void set_training(bool training);
  bool training() const { return training_; }

 private:
  struct Block {
    SpatioTemporalConv conv1;
    BatchNorm<float> bn1;
    SpatioTemporalConv conv2;
    BatchNorm<float> bn2;
    bool has_downsample = false;
    Conv3d<float> down_conv;
    BatchNorm<float> down_bn;
  };
  Tensor block_forward(Block& b, const Tensor& x);

  ModelKind kind_;
  ModelConfig config_;
  SpatioTemporalConv stem_conv_;
  BatchNorm<float> stem_bn_;
  std::vector<std::pair<std::string, Block>> blocks_;
  std::map<std::string, Linear<float>> heads_;
  bool training_ = true;
};

}  // namespace vidistill::nn
