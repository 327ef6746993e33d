#include "models.hpp"

#include "error.hpp"

namespace vidistill::nn {

std::string_view model_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kTeacher2d:
      return "teacher2d-tiny";
    case ModelKind::kRes3d:
      return "res3d-tiny";
    case ModelKind::kR2Plus1d:
      return "r2plus1d-tiny";
  }
  return "unknown";
}

ModelKind parse_model_name(std::string_view name) {
  if (name == "teacher2d-tiny") return ModelKind::kTeacher2d;
  if (name == "res3d-tiny") return ModelKind::kRes3d;
  if (name == "r2plus1d-tiny") return ModelKind::kR2Plus1d;
  usage_error("unknown model name '", name, "' (expected teacher2d-tiny, res3d-tiny or r2plus1d-tiny)");
}

namespace {

struct BlockPlan {
  std::string name;
  std::size_t in, out, stride;
};

std::vector<BlockPlan> block_plan(const ModelConfig& c) {
  return {{"stage1.block1", c.width1, c.width1, 1},
          {"stage1.block2", c.width1, c.width1, 1},
          {"stage2.block1", c.width1, c.width2, 2},
          {"stage2.block2", c.width2, c.width2, 1}};
}

void validate(const ModelConfig& c) {
  if (c.in_channels == 0 || c.width1 == 0 || c.width2 == 0) {
    usage_error("model widths and input channels must be positive");
  }
  if (c.temporal_kernel == 0) usage_error("temporal kernel extent must be positive");
}

}  // namespace

// --- Teacher ---------------------------------------------------------------

TeacherNet2D::TeacherNet2D(const ModelConfig& config, std::size_t num_classes)
    : config_(config), num_classes_(num_classes) {
  validate(config_);
  if (num_classes == 0) usage_error("teacher needs at least one class");
  ops::Conv2dGeometry stem_geo{{2, 2}, {1, 1}};
  stem_conv_ = Conv2d<float>(config_.in_channels, config_.width1, 3, 3, stem_geo);
  stem_bn_ = BatchNorm<float>(config_.width1);
  for (const auto& p : block_plan(config_)) {
    Block b;
    b.conv1 = Conv2d<float>(p.in, p.out, 3, 3, {{p.stride, p.stride}, {1, 1}});
    b.bn1 = BatchNorm<float>(p.out);
    b.conv2 = Conv2d<float>(p.out, p.out, 3, 3, {{1, 1}, {1, 1}});
    b.bn2 = BatchNorm<float>(p.out);
    if (p.stride != 1 || p.in != p.out) {
      b.has_downsample = true;
      b.down_conv = Conv2d<float>(p.in, p.out, 1, 1, {{p.stride, p.stride}, {0, 0}});
      b.down_bn = BatchNorm<float>(p.out);
    }
    blocks_.emplace_back(p.name, std::move(b));
  }
  head_ = Linear<float>(config_.width2, num_classes_);
}

Tensor TeacherNet2D::block_forward(Block& b, const Tensor& x) {
  auto y = ops::relu(b.bn1.forward(b.conv1.forward(x)));
  y = b.bn2.forward(b.conv2.forward(y));
  const Tensor shortcut = b.has_downsample ? b.down_bn.forward(b.down_conv.forward(x)) : x;
  return ops::relu(ops::add(y, shortcut));
}

Tensor TeacherNet2D::features(const Tensor& frames) {
  if (frames.rank() != 4 || frames.dim(1) != config_.in_channels) {
    usage_error("teacher expects [B×", config_.in_channels, "×H×W] frames, got ",
                shape_str(frames.shape()));
  }
  auto x = ops::relu(stem_bn_.forward(stem_conv_.forward(frames)));
  for (auto& [name, block] : blocks_) x = block_forward(block, x);
  return ops::global_avg_pool(x);
}

Tensor TeacherNet2D::logits(const Tensor& frames) { return head_.forward(features(frames)); }

ParameterSet<float> TeacherNet2D::trunk_state() const {
  ParameterSet<float> set;
  stem_conv_.collect("stem.conv", set);
  stem_bn_.collect("stem.bn", set);
  for (const auto& [name, b] : blocks_) {
    b.conv1.collect(join_name(name, "conv1"), set);
    b.bn1.collect(join_name(name, "bn1"), set);
    b.conv2.collect(join_name(name, "conv2"), set);
    b.bn2.collect(join_name(name, "bn2"), set);
    if (b.has_downsample) {
      b.down_conv.collect(join_name(name, "downsample.conv"), set);
      b.down_bn.collect(join_name(name, "downsample.bn"), set);
    }
  }
  return set;
}

ParameterSet<float> TeacherNet2D::state() const {
  auto set = trunk_state();
  head_.collect("head", set);
  return set;
}

void TeacherNet2D::reset_parameters(std::mt19937_64& rng) {
  stem_conv_.reset_parameters(rng);
  stem_bn_.reset_parameters();
  for (auto& [name, b] : blocks_) {
    b.conv1.reset_parameters(rng);
    b.bn1.reset_parameters();
    b.conv2.reset_parameters(rng);
    b.bn2.reset_parameters();
    if (b.has_downsample) {
      b.down_conv.reset_parameters(rng);
      b.down_bn.reset_parameters();
    }
  }
  head_.reset_parameters(rng);
}

void TeacherNet2D::set_training(bool training) {
  training_ = training;
  stem_bn_.training = training;
  for (auto& [name, b] : blocks_) {
    b.bn1.training = training;
    b.bn2.training = training;
    b.down_bn.training = training;
  }
}

Tensor teacher_logits(TeacherNet2D& teacher, const Tensor& frames) {
  if (teacher.training()) usage_error("teacher inference requires eval mode");
  NoGradGuard no_grad;
  return teacher.logits(frames);
}

// --- SpatioTemporalConv ----------------------------------------------------

SpatioTemporalConv::SpatioTemporalConv(bool factorized, std::size_t in, std::size_t out,
                                       std::size_t kt, std::size_t kh, std::size_t kw,
                                       ops::Conv3dGeometry geometry) {
  if (factorized) {
    impl_ = Conv2Plus1d<float>(in, out, kt, kh, kw, geometry);
  } else {
    impl_ = Conv3d<float>(in, out, kt, kh, kw, geometry);
  }
}

Tensor SpatioTemporalConv::forward(const Tensor& x) {
  return std::visit([&](auto& conv) { return conv.forward(x); }, impl_);
}

void SpatioTemporalConv::collect(const std::string& prefix, ParameterSet<float>& set) const {
  std::visit([&](const auto& conv) { conv.collect(prefix, set); }, impl_);
}

void SpatioTemporalConv::reset_parameters(std::mt19937_64& rng) {
  std::visit([&](auto& conv) { conv.reset_parameters(rng); }, impl_);
}

void SpatioTemporalConv::set_training(bool training) {
  if (auto* f = std::get_if<Conv2Plus1d<float>>(&impl_)) f->set_training(training);
}

// --- Student ---------------------------------------------------------------

StudentNet::StudentNet(ModelKind kind, const ModelConfig& config) : kind_(kind), config_(config) {
  if (kind == ModelKind::kTeacher2d) usage_error("teacher2d-tiny is not a student model");
  validate(config_);
  const bool factorized = kind == ModelKind::kR2Plus1d;
  const std::size_t kt = config_.temporal_kernel;
  const std::size_t pt = config_.temporal_padding ? kt / 2 : 0;
  stem_conv_ = SpatioTemporalConv(factorized, config_.in_channels, config_.width1, kt, 3, 3,
                                  {{1, 2, 2}, {pt, 1, 1}});
  stem_bn_ = BatchNorm<float>(config_.width1);
  for (const auto& p : block_plan(config_)) {
    Block b;
    b.conv1 = SpatioTemporalConv(factorized, p.in, p.out, kt, 3, 3,
                                 {{1, p.stride, p.stride}, {pt, 1, 1}});
    b.bn1 = BatchNorm<float>(p.out);
    b.conv2 = SpatioTemporalConv(factorized, p.out, p.out, kt, 3, 3, {{1, 1, 1}, {pt, 1, 1}});
    b.bn2 = BatchNorm<float>(p.out);
    if (p.stride != 1 || p.in != p.out) {
      b.has_downsample = true;
      b.down_conv = Conv3d<float>(p.in, p.out, 1, 1, 1, {{1, p.stride, p.stride}, {0, 0, 0}});
      b.down_bn = BatchNorm<float>(p.out);
    }
    blocks_.emplace_back(p.name, std::move(b));
  }
}

Tensor StudentNet::block_forward(Block& b, const Tensor& x) {
  auto y = ops::relu(b.bn1.forward(b.conv1.forward(x)));
  y = b.bn2.forward(b.conv2.forward(y));
  Tensor shortcut = b.has_downsample ? b.down_bn.forward(b.down_conv.forward(x)) : x;
  const std::size_t t_out = y.dim(2), t_in = shortcut.dim(2);
  if (t_out != t_in) shortcut = ops::crop_time(shortcut, (t_in - t_out) / 2, t_out);
  return ops::relu(ops::add(y, shortcut));
}

Tensor StudentNet::features(const Tensor& clips) {
  if (clips.rank() != 5 || clips.dim(1) != config_.in_channels) {
    usage_error("student expects [B×", config_.in_channels, "×T×H×W] clips, got ",
                shape_str(clips.shape()));
  }
  auto x = ops::relu(stem_bn_.forward(stem_conv_.forward(clips)));
  for (auto& [name, block] : blocks_) x = block_forward(block, x);
  return ops::global_avg_pool(x);
}

Tensor StudentNet::apply_head(const Tensor& features, const std::string& head) const {
  auto it = heads_.find(head);
  if (it == heads_.end()) usage_error("student has no head '", head, "'");
  return it->second.forward(features);
}

Tensor StudentNet::forward(const Tensor& clips, const std::string& head) {
  if (!has_head(head)) usage_error("student has no head '", head, "'");
  return apply_head(features(clips), head);
}

std::map<std::string, Tensor> StudentNet::forward_heads(const Tensor& clips,
                                                        const std::vector<std::string>& heads) {
  for (const auto& h : heads) {
    if (!has_head(h)) usage_error("student has no head '", h, "'");
  }
  const auto f = features(clips);
  std::map<std::string, Tensor> out;
  for (const auto& h : heads) out.emplace(h, apply_head(f, h));
  return out;
}

void StudentNet::add_head(const std::string& id, std::size_t classes, std::mt19937_64& rng) {
  if (id.empty() || id.find('.') != std::string::npos) usage_error("invalid head id '", id, "'");
  if (classes == 0) usage_error("head '", id, "' needs at least one class");
  Linear<float> head(config_.width2, classes);
  head.reset_parameters(rng);
  heads_[id] = std::move(head);
}

std::vector<std::string> StudentNet::head_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, h] : heads_) ids.push_back(id);
  return ids;
}

std::size_t StudentNet::head_classes(const std::string& id) const {
  auto it = heads_.find(id);
  if (it == heads_.end()) usage_error("student has no head '", id, "'");
  return it->second.weight.dim(0);
}

ParameterSet<float> StudentNet::trunk_state() const {
  ParameterSet<float> set;
  stem_conv_.collect("stem.conv", set);
  stem_bn_.collect("stem.bn", set);
  for (const auto& [name, b] : blocks_) {
    b.conv1.collect(join_name(name, "conv1"), set);
    b.bn1.collect(join_name(name, "bn1"), set);
    b.conv2.collect(join_name(name, "conv2"), set);
    b.bn2.collect(join_name(name, "bn2"), set);
    if (b.has_downsample) {
      b.down_conv.collect(join_name(name, "downsample.conv"), set);
      b.down_bn.collect(join_name(name, "downsample.bn"), set);
    }
  }
  return set;
}

ParameterSet<float> StudentNet::head_state() const {
  ParameterSet<float> set;
  for (const auto& [id, h] : heads_) h.collect("heads." + id, set);
  return set;
}

ParameterSet<float> StudentNet::state() const {
  auto set = trunk_state();
  auto heads = head_state();
  for (auto& p : heads.parameters) set.parameters.push_back(std::move(p));
  return set;
}

void StudentNet::reset_parameters(std::mt19937_64& rng) {
  stem_conv_.reset_parameters(rng);
  stem_bn_.reset_parameters();
  for (auto& [name, b] : blocks_) {
    b.conv1.reset_parameters(rng);
    b.bn1.reset_parameters();
    b.conv2.reset_parameters(rng);
    b.bn2.reset_parameters();
    if (b.has_downsample) {
      b.down_conv.reset_parameters(rng);
      b.down_bn.reset_parameters();
    }
  }
  for (auto& [id, h] : heads_) h.reset_parameters(rng);
}

void StudentNet::set_training(bool training) {
  training_ = training;
  stem_conv_.set_training(training);
  stem_bn_.training = training;
  for (auto& [name, b] : blocks_) {
    b.conv1.set_training(training);
    b.bn1.training = training;
    b.conv2.set_training(training);
    b.bn2.training = training;
    b.down_bn.training = training;
  }
}

}  // namespace vidistill::nn
