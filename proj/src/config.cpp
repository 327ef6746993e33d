#include "config.hpp"

#include <fstream>
#include <iterator>
#include <set>

#include "checkpoint.hpp"
#include "error.hpp"
#include "json.hpp"

namespace vidistill::config {

using nlohmann::json;
using nlohmann::ordered_json;

nn::ModelConfig ModelSection::model_config() const {
  nn::ModelConfig c;
  c.in_channels = in_channels;
  c.width1 = width1;
  c.width2 = width2;
  c.temporal_kernel = temporal_kernel;
  c.temporal_padding = temporal_padding;
  return c;
}

OptimSection OptimSection::defaults_for(Phase phase) {
  OptimSection o;
  switch (phase) {
    case Phase::kGeneric:
    case Phase::kTeacher:
      break;
    case Phase::kDistill:
      o.lr_step_epochs = 5;
      o.epochs = 15;
      break;
    case Phase::kFinetune:
      o.lr = 0.002;
      o.lr_step_epochs = 2;
      o.epochs = 8;
      o.weight_decay = 5e-3;
      break;
  }
  return o;
}

RunConfig defaults(Phase phase) {
  RunConfig c;
  c.phase = phase;
  c.optim = OptimSection::defaults_for(phase);
  return c;
}

namespace {

class Section {
 public:
  Section(const json& doc, std::string name) : name_(std::move(name)) {
    if (!doc.contains(name_)) return;
    node_ = &doc.at(name_);
    if (!node_->is_object()) usage_error("config section '", name_, "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& target) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key)) return;
    const auto& v = node_->at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
        target = v.get<bool>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
        target = v.get<std::string>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
          throw std::invalid_argument("expected a nonnegative integer");
        }
        target = v.get<T>();
      } else {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
        target = v.get<T>();
      }
    } catch (const std::exception& e) {
      usage_error("config key ", name_, ".", key, ": ", e.what());
    }
  }

  void read(const char* key, std::optional<double>& target) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key)) return;
    const auto& v = node_->at(key);
    if (v.is_null()) {
      target.reset();
    } else if (v.is_number()) {
      target = v.get<double>();
    } else {
      usage_error("config key ", name_, ".", key, ": expected a number or null");
    }
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key)) return nullptr;
    return &node_->at(key);
  }

  void finish() const {
    if (!node_) return;
    for (const auto& [key, value] : node_->items()) {
      if (!seen_.count(key)) usage_error("unknown config key '", name_, ".", key, "'");
    }
  }

 private:
  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

void validate(const RunConfig& c) {
  nn::parse_model_name(c.model.name);
  if (c.model.in_channels == 0 || c.model.width1 == 0 || c.model.width2 == 0 || c.model.temporal_kernel == 0) {
    usage_error("model widths, channels and temporal_kernel must be positive");
  }
  if (c.model.temporal_padding && c.model.temporal_kernel % 2 == 0) {
    usage_error("temporal padding needs an odd temporal_kernel");
  }
  const auto& g = c.data.generator;
  if (g.size.frames == 0 || g.size.height == 0 || g.size.width == 0) usage_error("data frame sizes must be positive");
  if (!(g.noise >= 0 && g.min_speed >= 0 && g.min_speed <= g.max_speed && g.min_scale > 0 &&
        g.min_scale <= g.max_scale && g.min_foreground <= g.max_foreground &&
        g.min_background <= g.max_background && g.max_texture >= 0)) {
    usage_error("invalid data generator ranges");
  }
  if (c.data.teacher_task != "appearance" && c.data.teacher_task != "scene" &&
      c.data.teacher_task != "motion-frames") {
    usage_error("data.teacher_task must be appearance, scene or motion-frames");
  }
  if (!(c.optim.lr > 0) || !(c.optim.momentum >= 0 && c.optim.momentum < 1) || !(c.optim.weight_decay >= 0) ||
      !(c.optim.lr_gamma > 0) || c.optim.lr_step_epochs == 0 || c.optim.batch_size == 0) {
    usage_error("invalid optim settings");
  }
  if (!(c.distill.tau > 0)) usage_error("distill.tau must be positive");
  if (c.distill.loss != "cross-entropy" && c.distill.loss != "mse-logits") {
    usage_error("distill.loss must be cross-entropy or mse-logits");
  }
  if (c.distill.pick_strategy != "center" && c.distill.pick_strategy != "random" &&
      c.distill.pick_strategy != "k-random") {
    usage_error("distill.pick_strategy must be center, random or k-random");
  }
  if (c.distill.pick_count == 0) usage_error("distill.pick_count must be positive");
  for (const auto& t : c.distill.teachers) {
    if (!(t.weight >= 0)) usage_error("teacher weights must be >= 0");
  }
  if (c.run.init != "scratch" && c.run.init != "inflate" && c.run.init != "distill") {
    usage_error("run.init must be scratch, inflate or distill");
  }
  if (c.run.clips_per_video == 0 || c.run.topk == 0 || c.run.log_every == 0) {
    usage_error("run.clips_per_video, run.topk and run.log_every must be positive");
  }
}

}  // namespace

RunConfig parse_config(const std::string& text, Phase phase) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    usage_error("config is not valid JSON: ", e.what());
  }
  if (!doc.is_object()) usage_error("config must be a JSON object");
  static const std::set<std::string> sections{"model", "data", "optim", "distill", "run"};
  for (const auto& [key, value] : doc.items()) {
    if (!sections.count(key)) usage_error("unknown config section '", key, "'");
  }

  RunConfig c = defaults(phase);
  {
    Section s(doc, "model");
    s.read("name", c.model.name);
    s.read("in_channels", c.model.in_channels);
    s.read("width1", c.model.width1);
    s.read("width2", c.model.width2);
    s.read("temporal_kernel", c.model.temporal_kernel);
    s.read("temporal_padding", c.model.temporal_padding);
    s.finish();
  }
  {
    Section s(doc, "data");
    auto& g = c.data.generator;
    s.read("dir", c.data.dir);
    s.read("frames", g.size.frames);
    s.read("height", g.size.height);
    s.read("width", g.size.width);
    s.read("noise", g.noise);
    s.read("min_speed", g.min_speed);
    s.read("max_speed", g.max_speed);
    s.read("min_scale", g.min_scale);
    s.read("max_scale", g.max_scale);
    s.read("min_foreground", g.min_foreground);
    s.read("max_foreground", g.max_foreground);
    s.read("min_background", g.min_background);
    s.read("max_background", g.max_background);
    s.read("max_texture", g.max_texture);
    s.read("teacher_images", c.data.sizes.teacher_images);
    s.read("teacher_val", c.data.sizes.teacher_val);
    s.read("distill_videos", c.data.sizes.distill_videos);
    s.read("target_train", c.data.sizes.target_train);
    s.read("target_test", c.data.sizes.target_test);
    s.read("teacher_task", c.data.teacher_task);
    s.finish();
  }
  {
    Section s(doc, "optim");
    s.read("lr", c.optim.lr);
    s.read("momentum", c.optim.momentum);
    s.read("weight_decay", c.optim.weight_decay);
    s.read("lr_gamma", c.optim.lr_gamma);
    s.read("lr_step_epochs", c.optim.lr_step_epochs);
    s.read("epochs", c.optim.epochs);
    s.read("batch_size", c.optim.batch_size);
    s.finish();
  }
  {
    Section s(doc, "distill");
    s.read("tau", c.distill.tau);
    s.read("loss", c.distill.loss);
    s.read("entropy_threshold", c.distill.entropy_threshold);
    s.read("pick_strategy", c.distill.pick_strategy);
    s.read("pick_count", c.distill.pick_count);
    if (const json* teachers = s.raw("teachers")) {
      if (!teachers->is_array()) usage_error("distill.teachers must be a list");
      c.distill.teachers.clear();
      for (const auto& t : *teachers) {
        TeacherRef ref;
        if (t.is_string()) {
          ref.checkpoint = t.get<std::string>();
        } else if (t.is_object()) {
          for (const auto& [key, value] : t.items()) {
            if (key == "checkpoint" && value.is_string()) {
              ref.checkpoint = value.get<std::string>();
            } else if (key == "weight" && value.is_number()) {
              ref.weight = value.get<double>();
            } else {
              usage_error("invalid distill.teachers entry key '", key, "'");
            }
          }
        } else {
          usage_error("distill.teachers entries must be paths or {checkpoint, weight} objects");
        }
        if (ref.checkpoint.empty()) usage_error("distill.teachers entry without a checkpoint");
        c.distill.teachers.push_back(ref);
      }
    }
    s.finish();
  }
  {
    Section s(doc, "run");
    s.read("seed", c.run.seed);
    s.read("init", c.run.init);
    s.read("init_checkpoint", c.run.init_checkpoint);
    s.read("scaled_inflation", c.run.scaled_inflation);
    s.read("clips_per_video", c.run.clips_per_video);
    s.read("topk", c.run.topk);
    s.read("log_every", c.run.log_every);
    s.read("eval_each_epoch", c.run.eval_each_epoch);
    s.finish();
  }
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path, Phase phase) {
  std::ifstream f(path);
  if (!f) usage_error("cannot read config ", path.string());
  const std::string text{std::istreambuf_iterator<char>(f), {}};
  return parse_config(text, phase);
}

RunConfig resolve_config(const std::filesystem::path& path, Phase phase) {
  return path.empty() ? parse_config("{}", phase) : load_config(path, phase);
}

namespace {

ordered_json to_document(const RunConfig& c) {
  ordered_json doc;
  doc["model"] = {{"name", c.model.name},
                  {"in_channels", c.model.in_channels},
                  {"width1", c.model.width1},
                  {"width2", c.model.width2},
                  {"temporal_kernel", c.model.temporal_kernel},
                  {"temporal_padding", c.model.temporal_padding}};
  const auto& g = c.data.generator;
  doc["data"] = {{"dir", c.data.dir},
                 {"frames", g.size.frames},
                 {"height", g.size.height},
                 {"width", g.size.width},
                 {"noise", g.noise},
                 {"min_speed", g.min_speed},
                 {"max_speed", g.max_speed},
                 {"min_scale", g.min_scale},
                 {"max_scale", g.max_scale},
                 {"min_foreground", g.min_foreground},
                 {"max_foreground", g.max_foreground},
                 {"min_background", g.min_background},
                 {"max_background", g.max_background},
                 {"max_texture", g.max_texture},
                 {"teacher_images", c.data.sizes.teacher_images},
                 {"teacher_val", c.data.sizes.teacher_val},
                 {"distill_videos", c.data.sizes.distill_videos},
                 {"target_train", c.data.sizes.target_train},
                 {"target_test", c.data.sizes.target_test},
                 {"teacher_task", c.data.teacher_task}};
  doc["optim"] = {{"lr", c.optim.lr},
                  {"momentum", c.optim.momentum},
                  {"weight_decay", c.optim.weight_decay},
                  {"lr_gamma", c.optim.lr_gamma},
                  {"lr_step_epochs", c.optim.lr_step_epochs},
                  {"epochs", c.optim.epochs},
                  {"batch_size", c.optim.batch_size}};
  ordered_json teachers = ordered_json::array();
  for (const auto& t : c.distill.teachers) teachers.push_back({{"checkpoint", t.checkpoint}, {"weight", t.weight}});
  doc["distill"] = {{"tau", c.distill.tau},
                    {"loss", c.distill.loss},
                    {"entropy_threshold", c.distill.entropy_threshold ? ordered_json(*c.distill.entropy_threshold)
                                                                      : ordered_json(nullptr)},
                    {"teachers", teachers},
                    {"pick_strategy", c.distill.pick_strategy},
                    {"pick_count", c.distill.pick_count}};
  doc["run"] = {{"seed", c.run.seed},
                {"init", c.run.init},
                {"init_checkpoint", c.run.init_checkpoint},
                {"scaled_inflation", c.run.scaled_inflation},
                {"clips_per_video", c.run.clips_per_video},
                {"topk", c.run.topk},
                {"log_every", c.run.log_every},
                {"eval_each_epoch", c.run.eval_each_epoch}};
  return doc;
}

}  // namespace

std::string RunConfig::to_json() const { return to_document(*this).dump(2) + "\n"; }

std::uint64_t RunConfig::hash() const { return io::fnv1a(to_document(*this).dump()); }

std::filesystem::path effective_config_path(const std::filesystem::path& checkpoint_path) {
  auto p = checkpoint_path;
  p += ".config.json";
  return p;
}

void write_effective_config(const RunConfig& config, const std::filesystem::path& checkpoint_path) {
  const auto path = effective_config_path(checkpoint_path);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) data_error("cannot write ", path.string());
  f << config.to_json();
}

}  // namespace vidistill::config
