#include "pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>

#include "distill.hpp"
#include "error.hpp"
#include "inflation.hpp"
#include "ops.hpp"
#include "optim.hpp"

namespace vidistill::pipeline {

namespace {

bool g_verbose = false;

// Seed streams for the independent random choices of one run.
enum Stream : std::uint64_t {
  kInitStream = 101,
  kHeadStream = 102,
  kShuffleStream = 103,
  kPickStream = 104,
  kFrameStream = 105,
};

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return std::mt19937_64(data::item_seed(seed, stream, index));
}

void progress(const char* phase, std::size_t epoch, std::size_t epochs, double loss, double lr,
              const std::optional<EvalResult>& eval, double wall) {
  if (!g_verbose) return;
  std::fprintf(stderr, "[%s] epoch %zu/%zu loss %.4f lr %.5f", phase, epoch + 1, epochs, loss, lr);
  if (eval) std::fprintf(stderr, " top1 %.2f%%", 100.0 * eval->top1);
  std::fprintf(stderr, " (%.1fs)\n", wall);
}

void check_finite(double loss, const char* phase, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss)) numerical_error(phase, ": non-finite loss at epoch ", epoch, " step ", step);
}

std::size_t argmax(std::span<const float> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

// True when `label` is among the k largest entries (ties broken by index).
bool in_topk(std::span<const double> row, std::size_t label, std::size_t k) {
  std::size_t better = 0;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (row[j] > row[label] || (row[j] == row[label] && j < label)) ++better;
  return better < k;
}

optim::Sgd make_optimizer(const nn::ParameterSet<float>& state, const config::OptimSection& o) {
  return optim::Sgd(state.parameters, {o.lr, o.momentum, o.weight_decay});
}

optim::StepSchedule make_schedule(const config::OptimSection& o) {
  return {o.lr, o.lr_gamma, o.lr_step_epochs};
}

io::Checkpoint make_checkpoint(std::string model, const nn::ParameterSet<float>& state,
                               const config::RunConfig& config) {
  io::Checkpoint ck;
  ck.meta.model = std::move(model);
  ck.meta.epoch = static_cast<std::uint32_t>(config.optim.epochs);
  ck.meta.config_hash = config.hash();
  ck.meta.seed = config.run.seed;
  for (const auto& [name, t] : io::flatten(state)) ck.entries.emplace_back(name, t.detach());
  return ck;
}

void save_run(const io::Checkpoint& ck, const config::RunConfig& config, const std::filesystem::path& out) {
  io::save_checkpoint(out, ck);
  config::write_effective_config(config, out);
}

struct TeacherTask {
  data::Corpus train, val;
  bool motion_labels;
};

TeacherTask teacher_task(const config::RunConfig& config) {
  if (config.data.teacher_task == "scene") return {data::Corpus::kTeacherScenes, data::Corpus::kTeacherScenesVal, false};
  if (config.data.teacher_task == "motion-frames") return {data::Corpus::kTargetTrain, data::Corpus::kTargetTest, true};
  return {data::Corpus::kTeacherImages, data::Corpus::kTeacherImagesVal, false};
}

const std::vector<int>& batch_labels(const data::ClipBatch& batch, bool motion, const std::filesystem::path& path) {
  const auto& labels = motion ? batch.motion : batch.appearance;
  if (labels.size() != batch.indices.size()) {
    data_error(path.string(), " has no ", motion ? "motion" : "appearance", " labels");
  }
  return labels;
}

std::vector<std::vector<std::size_t>> center_frames(std::size_t batch, std::size_t frames) {
  return std::vector<std::vector<std::size_t>>(batch, {(frames - 1) / 2});
}

// Teacher accuracy on the center frame of every clip in `corpus`.
EvalResult evaluate_teacher(nn::TeacherNet2D& teacher, const std::filesystem::path& corpus, bool motion,
                            std::size_t batch_size, std::size_t k) {
  const bool was_training = teacher.training();
  teacher.set_training(false);
  data::ClipStream stream(corpus, batch_size, std::nullopt);
  if (k > teacher.num_classes()) usage_error("top-k ", k, " exceeds ", teacher.num_classes(), " classes");
  EvalResult r;
  r.k = k;
  std::size_t correct = 0, topk = 0;
  data::ClipBatch batch;
  while (stream.next(batch)) {
    const auto& labels = batch_labels(batch, motion, corpus);
    const auto frames = gather_frames(batch.clips, center_frames(batch.indices.size(), batch.clips.dim(2)));
    const auto logits = nn::teacher_logits(teacher, frames);
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto row = logits.data().subspan(i * classes, classes);
      if (argmax(row) == static_cast<std::size_t>(labels[i])) ++correct;
      std::vector<double> d(row.begin(), row.end());
      if (in_topk(d, static_cast<std::size_t>(labels[i]), k)) ++topk;
    }
    r.videos += labels.size();
  }
  r.clips = r.videos;
  r.clip_accuracy = r.top1 = static_cast<double>(correct) / static_cast<double>(r.videos);
  r.topk = static_cast<double>(topk) / static_cast<double>(r.videos);
  teacher.set_training(was_training);
  return r;
}

std::string default_head(const nn::StudentNet& student) {
  if (student.has_head("motion")) return "motion";
  const auto ids = student.head_ids();
  if (ids.size() == 1) return ids.front();
  usage_error("student has no 'motion' head and ", ids.size(), " other heads");
}

EvalResult evaluate_student(nn::StudentNet& student, const std::string& head,
                            const std::filesystem::path& corpus, std::size_t window,
                            std::size_t clips_per_video, std::size_t k, std::size_t batch_size) {
  const std::size_t classes = student.head_classes(head);
  if (k == 0 || k > classes) usage_error("top-k ", k, " must be in [1, ", classes, "]");
  if (clips_per_video == 0) usage_error("clips_per_video must be positive");
  const bool was_training = student.training();
  student.set_training(false);
  NoGradGuard no_grad;
  data::ClipStream stream(corpus, batch_size, std::nullopt);
  const std::size_t frames = stream.header().frames;
  if (frames < window) {
    usage_error(corpus.string(), " holds ", frames, "-frame clips, shorter than the ", window, "-frame window");
  }
  const auto starts = window_starts(frames, window, clips_per_video);
  EvalResult r;
  r.k = k;
  std::size_t clip_correct = 0;
  std::vector<double> video_logits;
  std::vector<int> video_labels;
  data::ClipBatch batch;
  while (stream.next(batch)) {
    const auto& labels = batch_labels(batch, true, corpus);
    const std::size_t b = labels.size();
    std::vector<double> sum(b * classes, 0.0);
    for (std::size_t s : starts) {
      const auto logits = student.forward(clip_window(batch.clips, s, window), head);
      const auto v = logits.data();
      for (std::size_t i = 0; i < b; ++i) {
        if (argmax(v.subspan(i * classes, classes)) == static_cast<std::size_t>(labels[i])) ++clip_correct;
        for (std::size_t j = 0; j < classes; ++j) sum[i * classes + j] += v[i * classes + j];
      }
    }
    video_logits.insert(video_logits.end(), sum.begin(), sum.end());
    video_labels.insert(video_labels.end(), labels.begin(), labels.end());
    r.videos += b;
  }
  r.clips = r.videos * starts.size();
  r.clip_accuracy = static_cast<double>(clip_correct) / static_cast<double>(r.clips);
  const auto ranking = rank_accuracy(video_logits, video_labels, classes, k);
  r.top1 = ranking.top1;
  r.topk = ranking.topk;
  student.set_training(was_training);
  return r;
}

metrics::Row eval_row(const char* phase, std::size_t epoch, std::size_t step, const EvalResult& e) {
  metrics::Row row;
  row.phase = phase;
  row.kind = "eval";
  row.epoch = epoch;
  row.step = step;
  row.clip_accuracy = e.clip_accuracy;
  row.top1 = e.top1;
  row.topk = e.topk;
  row.k = e.k;
  return row;
}

nn::ModelKind student_kind(const config::RunConfig& config) {
  const auto kind = nn::parse_model_name(config.model.name);
  if (kind == nn::ModelKind::kTeacher2d) usage_error("model.name must name a student (res3d-tiny or r2plus1d-tiny)");
  return kind;
}

void check_channels(std::size_t model_channels, const data::ContainerHeader& h, const std::filesystem::path& p) {
  if (h.channels != model_channels) {
    data_error(p.string(), " holds ", h.channels, "-channel clips but the model expects ", model_channels);
  }
}

}  // namespace

void set_verbose(bool verbose) { g_verbose = verbose; }

std::filesystem::path corpus_path(const config::RunConfig& config, data::Corpus corpus) {
  return std::filesystem::path(config.data.dir) / std::string(data::corpus_file_name(corpus));
}

void generate_data(const config::RunConfig& config) {
  data::build_all(config.data.dir, config.data.sizes, config.run.seed, config.data.generator);
}

Ranking rank_accuracy(std::span<const double> logits, std::span<const int> labels, std::size_t classes,
                      std::size_t k) {
  if (classes == 0 || logits.size() != labels.size() * classes) {
    usage_error(logits.size(), " logits do not form ", labels.size(), " rows of ", classes);
  }
  if (k == 0 || k > classes) usage_error("top-k ", k, " must be in [1, ", classes, "]");
  Ranking r;
  if (labels.empty()) return r;
  std::size_t top1 = 0, topk = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      data_error("label ", labels[i], " out of range for ", classes, " classes");
    }
    const auto row = logits.subspan(i * classes, classes);
    const auto label = static_cast<std::size_t>(labels[i]);
    top1 += in_topk(row, label, 1);
    topk += in_topk(row, label, k);
  }
  const auto n = static_cast<double>(labels.size());
  r.top1 = static_cast<double>(top1) / n;
  r.topk = static_cast<double>(topk) / n;
  return r;
}

Tensor gather_frames(const Tensor& clips, const std::vector<std::vector<std::size_t>>& frames) {
  if (clips.rank() != 5 || frames.size() != clips.dim(0)) {
    usage_error("gather_frames: ", frames.size(), " frame lists for clips ", shape_str(clips.shape()));
  }
  const std::size_t c = clips.dim(1), t = clips.dim(2), plane = clips.dim(3) * clips.dim(4);
  std::size_t total = 0;
  for (const auto& f : frames) total += f.size();
  std::vector<float> out;
  out.reserve(total * c * plane);
  const auto v = clips.data();
  for (std::size_t b = 0; b < frames.size(); ++b)
    for (std::size_t f : frames[b]) {
      if (f >= t) usage_error("frame ", f, " out of range for ", t, "-frame clips");
      for (std::size_t ch = 0; ch < c; ++ch) {
        const auto src = v.begin() + static_cast<std::ptrdiff_t>(((b * c + ch) * t + f) * plane);
        out.insert(out.end(), src, src + static_cast<std::ptrdiff_t>(plane));
      }
    }
  return Tensor({total, c, clips.dim(3), clips.dim(4)}, std::move(out));
}

Tensor clip_window(const Tensor& clips, std::size_t start, std::size_t length) {
  if (clips.rank() != 5 || length == 0 || start + length > clips.dim(2)) {
    usage_error("clip_window [", start, ", ", start + length, ") outside clips ", shape_str(clips.shape()));
  }
  if (start == 0 && length == clips.dim(2)) return clips;
  const std::size_t bc = clips.dim(0) * clips.dim(1), t = clips.dim(2), plane = clips.dim(3) * clips.dim(4);
  std::vector<float> out(bc * length * plane);
  const auto v = clips.data();
  for (std::size_t i = 0; i < bc; ++i)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((i * t + start) * plane), length * plane,
                out.begin() + static_cast<std::ptrdiff_t>(i * length * plane));
  return Tensor({clips.dim(0), clips.dim(1), length, clips.dim(3), clips.dim(4)}, std::move(out));
}

std::vector<std::size_t> window_starts(std::size_t frames, std::size_t length, std::size_t count) {
  if (length == 0 || length > frames || count == 0) {
    usage_error("cannot place ", count, " windows of ", length, " frames in ", frames);
  }
  const std::size_t span = frames - length;
  if (count == 1) return {span / 2};
  std::vector<std::size_t> starts(count);
  for (std::size_t i = 0; i < count; ++i) starts[i] = (i * span * 2 + (count - 1)) / (2 * (count - 1));
  return starts;
}

// --- Checkpoint reconstruction ---------------------------------------------

nn::ModelConfig infer_model_config(const io::Checkpoint& ck, bool temporal_padding) {
  const auto kind = nn::parse_model_name(ck.meta.model);
  nn::ModelConfig c;
  c.temporal_padding = temporal_padding;
  c.width1 = ck.at("stem.bn.weight").dim(0);
  c.width2 = ck.at("stage2.block1.bn2.weight").dim(0);
  switch (kind) {
    case nn::ModelKind::kTeacher2d:
      c.in_channels = ck.at("stem.conv.weight").dim(1);
      break;
    case nn::ModelKind::kRes3d: {
      const auto& w = ck.at("stem.conv.weight");
      c.in_channels = w.dim(1);
      c.temporal_kernel = w.dim(2);
      break;
    }
    case nn::ModelKind::kR2Plus1d:
      c.in_channels = ck.at("stem.conv.conv_spatial.weight").dim(1);
      c.temporal_kernel = ck.at("stem.conv.conv_temporal.weight").dim(2);
      break;
  }
  return c;
}

std::unique_ptr<nn::TeacherNet2D> load_teacher(const io::Checkpoint& ck) {
  if (nn::parse_model_name(ck.meta.model) != nn::ModelKind::kTeacher2d) {
    usage_error("expected a teacher2d-tiny checkpoint, got ", ck.meta.model);
  }
  auto net = std::make_unique<nn::TeacherNet2D>(infer_model_config(ck, true), ck.at("head.weight").dim(0));
  io::assign_state(net->state(), ck);
  net->set_training(false);
  return net;
}

std::unique_ptr<nn::StudentNet> load_student(const io::Checkpoint& ck, bool temporal_padding) {
  const auto kind = nn::parse_model_name(ck.meta.model);
  if (kind == nn::ModelKind::kTeacher2d) usage_error("expected a student checkpoint, got ", ck.meta.model);
  auto net = std::make_unique<nn::StudentNet>(kind, infer_model_config(ck, temporal_padding));
  std::mt19937_64 unused(0);
  for (const auto& [name, t] : ck.entries) {
    if (!name.starts_with("heads.") || !name.ends_with(".weight")) continue;
    const auto id = name.substr(6, name.size() - 6 - 7);
    net->add_head(id, t.dim(0), unused);
  }
  io::assign_state(net->state(), ck);
  net->set_training(false);
  return net;
}

// --- Teacher training ------------------------------------------------------

TrainResult train_teacher(const config::RunConfig& config, const std::filesystem::path& out) {
  const auto task = teacher_task(config);
  const auto train_path = corpus_path(config, task.train);
  const auto val_path = corpus_path(config, task.val);
  const auto& o = config.optim;
  const std::uint64_t seed = config.run.seed;

  data::ClipStream stream(train_path, o.batch_size, data::item_seed(seed, kShuffleStream, 0));
  check_channels(config.model.in_channels, stream.header(), train_path);
  nn::TeacherNet2D teacher(config.model.model_config(), task.motion_labels ? data::kMotionClasses
                                                                            : data::kAppearanceClasses);
  auto init_rng = stream_rng(seed, kInitStream);
  teacher.reset_parameters(init_rng);
  teacher.set_training(true);
  auto sgd = make_optimizer(teacher.state(), o);
  const auto schedule = make_schedule(o);

  metrics::Log log(metrics::metrics_path(out));
  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    sgd.set_lr(schedule.lr_at(epoch));
    stream.start_epoch(epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    data::ClipBatch batch;
    while (stream.next(batch)) {
      const auto& labels = batch_labels(batch, task.motion_labels, train_path);
      const std::size_t t = batch.clips.dim(2);
      std::vector<std::vector<std::size_t>> picks(batch.indices.size());
      for (std::size_t i = 0; i < picks.size(); ++i) {
        if (t == 1) {
          picks[i] = {0};
        } else {
          auto rng = stream_rng(seed, kFrameStream + 16 * epoch, batch.indices[i]);
          picks[i] = {std::uniform_int_distribution<std::size_t>(0, t - 1)(rng)};
        }
      }
      sgd.zero_grad();
      const auto loss = ops::cross_entropy(teacher.logits(gather_frames(batch.clips, picks)), labels);
      const double lv = loss.item();
      check_finite(lv, "train-teacher", epoch, step);
      loss.backward();
      sgd.step();
      loss_sum += lv;
      ++batches;
      ++step;
      if (step % config.run.log_every == 0) {
        metrics::Row row;
        row.phase = "teacher";
        row.epoch = epoch;
        row.step = step;
        row.loss = lv;
        row.lr = sgd.lr();
        log.append(row);
      }
    }
    const double mean = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    result.epoch_losses.push_back(mean);
    metrics::Row row;
    row.phase = "teacher";
    row.kind = "epoch";
    row.epoch = epoch;
    row.step = step;
    row.loss = mean;
    row.lr = sgd.lr();
    log.append(row);
    std::optional<EvalResult> eval;
    if (config.run.eval_each_epoch || epoch + 1 == o.epochs) {
      eval = evaluate_teacher(teacher, val_path, task.motion_labels, o.batch_size,
                              std::min(config.run.topk, teacher.num_classes()));
      log.append(eval_row("teacher", epoch, step, *eval));
      result.eval = eval;
    }
    progress("teacher", epoch, o.epochs, mean, sgd.lr(), eval, log.elapsed());
  }
  teacher.set_training(false);
  save_run(make_checkpoint(std::string(nn::model_name(nn::ModelKind::kTeacher2d)), teacher.state(), config),
           config, out);
  result.rows = log.rows();
  return result;
}

// --- Distillation ----------------------------------------------------------

namespace {

struct LoadedTeacher {
  std::unique_ptr<nn::TeacherNet2D> net;
  std::string head;
  double weight = 1.0;
  std::uint64_t hash = 0;
};

struct CachedTarget {
  std::vector<double> probs;
  std::vector<double> logits;  // averaged frame logits
  double entropy = 0.0;
};

}  // namespace

TrainResult distill_pretrain(const config::RunConfig& config, const std::filesystem::path& out) {
  const auto& o = config.optim;
  const auto& d = config.distill;
  const std::uint64_t seed = config.run.seed;
  if (d.teachers.empty()) usage_error("distillation needs at least one teacher in distill.teachers");
  const auto kind = student_kind(config);
  const auto loss_kind = distill::parse_loss_kind(d.loss);
  const auto pick = distill::parse_pick_strategy(d.pick_strategy, d.pick_count);
  const auto videos = corpus_path(config, data::Corpus::kDistillVideos);
  data::ClipStream stream(videos, o.batch_size, data::item_seed(seed, kShuffleStream, 0));
  check_channels(config.model.in_channels, stream.header(), videos);
  const std::size_t frames = stream.header().frames;
  if (pick.kind == distill::PickKind::kRandomSubset && pick.count > frames) {
    usage_error("k-random picks ", pick.count, " frames from ", frames, "-frame clips");
  }

  nn::StudentNet student(kind, config.model.model_config());
  auto init_rng = stream_rng(seed, kInitStream);
  student.reset_parameters(init_rng);
  auto head_rng = stream_rng(seed, kHeadStream);

  std::vector<LoadedTeacher> teachers;
  for (std::size_t i = 0; i < d.teachers.size(); ++i) {
    const auto ck = io::load_checkpoint(d.teachers[i].checkpoint);
    LoadedTeacher t;
    t.net = load_teacher(ck);
    if (t.net->config().in_channels != config.model.in_channels) {
      usage_error("teacher ", d.teachers[i].checkpoint, " takes ", t.net->config().in_channels,
                  "-channel frames but the student takes ", config.model.in_channels);
    }
    t.head = "teacher" + std::to_string(i);
    t.weight = d.teachers[i].weight;
    t.hash = io::state_hash(t.net->state());
    student.add_head(t.head, t.net->num_classes(), head_rng);
    if (student.head_classes(t.head) != t.net->num_classes()) {
      usage_error("head ", t.head, " does not match teacher dimension ", t.net->num_classes());
    }
    teachers.push_back(std::move(t));
  }
  std::vector<std::string> head_ids;
  std::vector<double> weights;
  for (const auto& t : teachers) {
    head_ids.push_back(t.head);
    weights.push_back(t.weight);
  }

  student.set_training(true);
  auto sgd = make_optimizer(student.state(), o);
  const auto schedule = make_schedule(o);
  const bool cache = pick.kind == distill::PickKind::kCenter;
  std::vector<std::map<std::size_t, CachedTarget>> cached(teachers.size());

  metrics::Log log(metrics::metrics_path(out));
  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    sgd.set_lr(schedule.lr_at(epoch));
    stream.start_epoch(epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0, kept_epoch = 0, dropped_epoch = 0;
    data::ClipBatch batch;
    while (stream.next(batch)) {
      const std::size_t b = batch.indices.size();
      std::vector<std::vector<std::size_t>> picks(b);
      for (std::size_t i = 0; i < b; ++i) {
        auto rng = stream_rng(seed, kPickStream + 16 * epoch, batch.indices[i]);
        picks[i] = distill::pick_frames(frames, pick, rng);
      }
      std::optional<Tensor> picked;
      std::vector<Tensor> losses;
      std::vector<double> teacher_losses;
      std::size_t kept = 0, dropped = 0;
      std::vector<std::vector<CachedTarget>> targets(teachers.size());
      for (std::size_t ti = 0; ti < teachers.size(); ++ti) {
        auto& tcache = cached[ti];
        const bool hit = cache && std::all_of(batch.indices.begin(), batch.indices.end(),
                                              [&](std::size_t i) { return tcache.count(i) != 0; });
        if (hit) {
          for (std::size_t i : batch.indices) targets[ti].push_back(tcache.at(i));
          continue;
        }
        if (!picked) picked = gather_frames(batch.clips, picks);
        const auto logits = nn::teacher_logits(*teachers[ti].net, *picked);
        const std::size_t k = logits.dim(1), n = picks[0].size();
        const auto lv = logits.data();
        for (std::size_t i = 0; i < b; ++i) {
          std::vector<double> rows(lv.begin() + static_cast<std::ptrdiff_t>(i * n * k),
                                   lv.begin() + static_cast<std::ptrdiff_t>((i + 1) * n * k));
          const auto target = distill::make_target(rows, k, d.tau);
          CachedTarget c{target.probs, std::vector<double>(k, 0.0), target.entropy};
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < k; ++j) c.logits[j] += rows[r * k + j] / static_cast<double>(n);
          if (cache) tcache[batch.indices[i]] = c;
          targets[ti].push_back(std::move(c));
        }
      }

      sgd.zero_grad();
      const auto outputs = student.forward_heads(batch.clips, head_ids);
      for (std::size_t ti = 0; ti < teachers.size(); ++ti) {
        const auto& tg = targets[ti];
        const std::size_t k = tg.front().probs.size();
        std::vector<distill::SoftTarget> soft;
        std::vector<float> values;
        values.reserve(b * k);
        for (const auto& c : tg) {
          soft.push_back({c.probs, c.entropy});
          const auto& src = loss_kind == distill::LossKind::kCrossEntropy ? c.probs : c.logits;
          for (double v : src) values.push_back(static_cast<float>(v));
        }
        const auto filter = distill::entropy_filter(soft, d.entropy_threshold);
        kept += filter.kept;
        dropped += filter.dropped;
        const Tensor target_tensor({b, k}, std::move(values));
        const auto& z = outputs.at(teachers[ti].head);
        losses.push_back(loss_kind == distill::LossKind::kCrossEntropy
                             ? distill::soft_target_loss(z, target_tensor, filter.weights)
                             : distill::mse_logit_loss(z, target_tensor, filter.weights));
        teacher_losses.push_back(losses.back().item());
      }
      const auto total = distill::multi_teacher_loss(losses, weights);
      const double lv = total.item();
      check_finite(lv, "distill", epoch, step);
      total.backward();
      sgd.step();
      loss_sum += lv;
      kept_epoch += kept;
      dropped_epoch += dropped;
      ++batches;
      ++step;
      if (step % config.run.log_every == 0) {
        metrics::Row row;
        row.phase = "distill";
        row.epoch = epoch;
        row.step = step;
        row.loss = lv;
        row.lr = sgd.lr();
        row.teacher_losses = teacher_losses;
        row.teacher_weights = weights;
        row.kept = kept;
        row.dropped = dropped;
        log.append(row);
      }
    }
    const double mean = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    result.epoch_losses.push_back(mean);
    metrics::Row row;
    row.phase = "distill";
    row.kind = "epoch";
    row.epoch = epoch;
    row.step = step;
    row.loss = mean;
    row.lr = sgd.lr();
    row.kept = kept_epoch;
    row.dropped = dropped_epoch;
    log.append(row);
    progress("distill", epoch, o.epochs, mean, sgd.lr(), std::nullopt, log.elapsed());
  }
  for (const auto& t : teachers) {
    if (io::state_hash(t.net->state()) != t.hash) numerical_error("teacher ", t.head, " was modified during distillation");
  }
  student.set_training(false);
  save_run(make_checkpoint(std::string(nn::model_name(kind)), student.state(), config), config, out);
  result.rows = log.rows();
  return result;
}

// --- Inflation -------------------------------------------------------------

void inflate_checkpoint(const config::RunConfig& config, const std::filesystem::path& teacher_path,
                        const std::filesystem::path& out, bool scaled) {
  const auto teacher = load_teacher(io::load_checkpoint(teacher_path));
  auto mc = teacher->config();
  mc.temporal_kernel = config.model.temporal_kernel;
  mc.temporal_padding = config.model.temporal_padding;
  nn::StudentNet student(nn::ModelKind::kRes3d, mc);
  auto rng = stream_rng(config.run.seed, kInitStream);
  student.reset_parameters(rng);
  inflation::inflate(*teacher, student, {scaled});
  student.set_training(false);
  save_run(make_checkpoint(std::string(nn::model_name(nn::ModelKind::kRes3d)), student.state(), config), config,
           out);
}

// --- Finetuning ------------------------------------------------------------

TrainResult finetune(const config::RunConfig& config, const std::filesystem::path& out) {
  const auto& o = config.optim;
  const std::uint64_t seed = config.run.seed;
  const auto kind = student_kind(config);
  const auto train_path = corpus_path(config, data::Corpus::kTargetTrain);
  const auto test_path = corpus_path(config, data::Corpus::kTargetTest);
  data::ClipStream stream(train_path, o.batch_size, data::item_seed(seed, kShuffleStream, 0));
  check_channels(config.model.in_channels, stream.header(), train_path);

  nn::StudentNet student(kind, config.model.model_config());
  auto init_rng = stream_rng(seed, kInitStream);
  student.reset_parameters(init_rng);
  const auto& init = config.run.init;
  if (init != "scratch") {
    if (config.run.init_checkpoint.empty()) usage_error("run.init=", init, " needs run.init_checkpoint");
    if (init == "inflate" && kind != nn::ModelKind::kRes3d) {
      usage_error("inflation init needs res3d-tiny; ", config.model.name, " has no 2D counterpart");
    }
    const auto ck = io::load_checkpoint(config.run.init_checkpoint);
    if (init == "inflate" && ck.meta.model == nn::model_name(nn::ModelKind::kTeacher2d)) {
      inflation::inflate(*load_teacher(ck), student, {config.run.scaled_inflation});
    } else {
      if (ck.meta.model != config.model.name) {
        usage_error("init checkpoint holds ", ck.meta.model, " but model.name is ", config.model.name);
      }
      io::assign_state(student.trunk_state(), ck, {"heads."});
    }
  }
  student.remove_heads();
  auto head_rng = stream_rng(seed, kHeadStream);
  student.add_head("motion", data::kMotionClasses, head_rng);
  student.set_training(true);
  auto sgd = make_optimizer(student.state(), o);
  const auto schedule = make_schedule(o);
  const std::size_t window = config.data.generator.size.frames;

  metrics::Log log(metrics::metrics_path(out));
  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    sgd.set_lr(schedule.lr_at(epoch));
    stream.start_epoch(epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    data::ClipBatch batch;
    while (stream.next(batch)) {
      const auto& labels = batch_labels(batch, true, train_path);
      sgd.zero_grad();
      const auto loss = ops::cross_entropy(student.forward(batch.clips, "motion"), labels);
      const double lv = loss.item();
      check_finite(lv, "finetune", epoch, step);
      loss.backward();
      sgd.step();
      loss_sum += lv;
      ++batches;
      ++step;
      if (step % config.run.log_every == 0) {
        metrics::Row row;
        row.phase = "finetune";
        row.epoch = epoch;
        row.step = step;
        row.loss = lv;
        row.lr = sgd.lr();
        log.append(row);
      }
    }
    const double mean = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    result.epoch_losses.push_back(mean);
    metrics::Row row;
    row.phase = "finetune";
    row.kind = "epoch";
    row.epoch = epoch;
    row.step = step;
    row.loss = mean;
    row.lr = sgd.lr();
    log.append(row);
    std::optional<EvalResult> eval;
    if (config.run.eval_each_epoch || epoch + 1 == o.epochs) {
      eval = evaluate_student(student, "motion", test_path, window, config.run.clips_per_video,
                              std::min(config.run.topk, data::kMotionClasses), o.batch_size);
      log.append(eval_row("finetune", epoch, step, *eval));
      result.eval = eval;
    }
    progress("finetune", epoch, o.epochs, mean, sgd.lr(), eval, log.elapsed());
  }
  student.set_training(false);
  save_run(make_checkpoint(std::string(nn::model_name(kind)), student.state(), config), config, out);
  result.rows = log.rows();
  return result;
}

// --- Evaluation and export -------------------------------------------------

EvalResult evaluate(const config::RunConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& corpus, std::size_t clips_per_video, std::size_t k) {
  const auto ck = io::load_checkpoint(checkpoint);
  if (ck.meta.model == nn::model_name(nn::ModelKind::kTeacher2d)) {
    auto teacher = load_teacher(ck);
    if (k == 0 || k > teacher->num_classes()) usage_error("top-k ", k, " must be in [1, ", teacher->num_classes(), "]");
    return evaluate_teacher(*teacher, corpus, teacher_task(config).motion_labels, config.optim.batch_size, k);
  }
  auto student = load_student(ck, config.model.temporal_padding);
  return evaluate_student(*student, default_head(*student), corpus, config.data.generator.size.frames,
                          clips_per_video, k, config.optim.batch_size);
}

std::size_t export_features(const config::RunConfig& config, const std::filesystem::path& checkpoint,
                            const std::filesystem::path& corpus, const std::filesystem::path& out) {
  const auto ck = io::load_checkpoint(checkpoint);
  std::unique_ptr<nn::TeacherNet2D> teacher;
  std::unique_ptr<nn::StudentNet> student;
  std::size_t dim = 0;
  if (ck.meta.model == nn::model_name(nn::ModelKind::kTeacher2d)) {
    teacher = load_teacher(ck);
    dim = teacher->feature_dim();
  } else {
    student = load_student(ck, config.model.temporal_padding);
    dim = student->feature_dim();
  }
  NoGradGuard no_grad;
  data::ClipStream stream(corpus, config.optim.batch_size, std::nullopt);
  const auto& h = stream.header();
  std::vector<float> features, appearance, motion;
  data::ClipBatch batch;
  while (stream.next(batch)) {
    const auto f = teacher ? teacher->features(gather_frames(batch.clips, center_frames(batch.indices.size(), h.frames)))
                           : student->features(batch.clips);
    features.insert(features.end(), f.data().begin(), f.data().end());
    for (int a : batch.appearance) appearance.push_back(static_cast<float>(a));
    for (int m : batch.motion) motion.push_back(static_cast<float>(m));
  }
  const std::size_t n = stream.reader().size();
  io::Checkpoint table;
  table.meta.model = std::string(io::kFeatureTableName);
  table.meta.epoch = ck.meta.epoch;
  table.meta.config_hash = ck.meta.config_hash;
  table.meta.seed = ck.meta.seed;
  table.entries.emplace_back("features", Tensor({n, dim}, std::move(features)));
  if (h.has_appearance()) table.entries.emplace_back("appearance", Tensor({n}, std::move(appearance)));
  if (h.has_motion()) table.entries.emplace_back("motion", Tensor({n}, std::move(motion)));
  io::save_checkpoint(out, table);
  return n;
}

}  // namespace vidistill::pipeline
