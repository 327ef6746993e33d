#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vidistill/vidistill.h"

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& common) {
  app->add_option("--config", common.config, "JSON run configuration");
  app->add_option_function<std::uint64_t>(
      "--seed",
      [&common](const std::uint64_t& s) {
        common.seed = s;
        common.seed_given = true;
      },
      "Run seed (overrides run.seed)");
  app->add_option("--set", common.sets, "Override a config key: section.key=<json>");
  app->add_flag("--quiet", common.quiet, "No per-epoch progress lines");
}

int fail(vdl_status status) {
  std::fprintf(stderr, "error: %s\n", vdl_last_error());
  return static_cast<int>(status);
}

std::string json_string(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

// Loads the configuration for `phase` and applies --seed and --set.
vdl_status open_config(const Common& common, const char* phase, vdl_config** out) {
  vdl_set_verbose(common.quiet ? 0 : 1);
  vdl_status s = vdl_config_load(common.config.c_str(), phase, out);
  if (s != VDL_OK) return s;
  if (common.seed_given) {
    s = vdl_config_set(*out, "run.seed", std::to_string(common.seed).c_str());
    if (s != VDL_OK) return s;
  }
  for (const auto& kv : common.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
      return VDL_USAGE;
    }
    s = vdl_config_set(*out, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
    if (s != VDL_OK) return s;
  }
  return VDL_OK;
}

// A corpus argument is a file path or a corpus name under data.dir.
std::string resolve_corpus(const vdl_config* config, const std::string& corpus) {
  if (std::filesystem::exists(corpus)) return corpus;
  std::size_t needed = 0;
  if (vdl_config_corpus_path(config, corpus.c_str(), nullptr, 0, &needed) != VDL_OK) return corpus;
  std::string path(needed, '\0');
  vdl_config_corpus_path(config, corpus.c_str(), path.data(), needed, &needed);
  path.resize(needed - 1);
  return path;
}

struct ConfigHandle {
  vdl_config* ptr = nullptr;
  ~ConfigHandle() { vdl_config_free(ptr); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image-to-video distillation on synthetic MotionShapes clips"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-data", "Generate every corpus under data.dir");
  add_common(gen, common);

  std::string out, teacher, checkpoint, corpus, init, init_checkpoint, task;
  std::vector<std::string> teachers;
  bool unscaled = false;
  std::size_t clips_per_video = 0, topk = 0, instances = 20;

  auto* train = app.add_subcommand("train-teacher", "Train the 2D image teacher");
  add_common(train, common);
  train->add_option("--out", out, "Checkpoint to write")->required();
  train->add_option("--task", task, "appearance, scene or motion-frames (overrides data.teacher_task)");

  auto* dist = app.add_subcommand("distill", "Distillation pre-training of a video student");
  add_common(dist, common);
  dist->add_option("--out", out, "Checkpoint to write")->required();
  dist->add_option("--teacher", teachers, "Teacher checkpoint (repeatable; overrides distill.teachers)");

  auto* infl = app.add_subcommand("inflate", "Inflate a 2D teacher into a res3d-tiny student");
  add_common(infl, common);
  infl->add_option("--teacher", teacher, "Teacher checkpoint")->required();
  infl->add_option("--out", out, "Checkpoint to write")->required();
  infl->add_flag("--unscaled", unscaled, "Replicate kernels without dividing by the temporal extent");

  auto* fine = app.add_subcommand("finetune", "Finetune a student on target-action labels");
  add_common(fine, common);
  fine->add_option("--out", out, "Checkpoint to write")->required();
  fine->add_option("--init", init, "scratch, inflate or distill (overrides run.init)");
  fine->add_option("--init-checkpoint", init_checkpoint, "Checkpoint for inflate/distill init");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a labelled corpus");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  eval->add_option("--corpus", corpus, "Corpus path or name")->required();
  eval->add_option("--clips-per-video", clips_per_video, "Windows averaged per video (default run.clips_per_video)");
  eval->add_option("--topk", topk, "k for top-k accuracy (default run.topk)");

  auto* feat = app.add_subcommand("export-features", "Write pooled trunk features per clip");
  add_common(feat, common);
  feat->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  feat->add_option("--corpus", corpus, "Corpus path or name")->required();
  feat->add_option("--out", out, "Feature file to write")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks of every layer and loss");
  add_common(grad, common);
  grad->add_option("--instances", instances, "Random instances per check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : VDL_USAGE;
  }

  ConfigHandle cfg;
  auto run = [&](const char* phase) { return open_config(common, phase, &cfg.ptr); };
  vdl_status s = VDL_OK;

  if (gen->parsed()) {
    if ((s = run("generic")) != VDL_OK) return fail(s);
    if ((s = vdl_generate_data(cfg.ptr)) != VDL_OK) return fail(s);
    return 0;
  }
  if (train->parsed()) {
    if ((s = run("teacher")) != VDL_OK) return fail(s);
    if (!task.empty() && (s = vdl_config_set(cfg.ptr, "data.teacher_task", json_string(task).c_str())) != VDL_OK) {
      return fail(s);
    }
    if ((s = vdl_train_teacher(cfg.ptr, out.c_str())) != VDL_OK) return fail(s);
    return 0;
  }
  if (dist->parsed()) {
    if ((s = run("distill")) != VDL_OK) return fail(s);
    if (!teachers.empty()) {
      std::string list = "[";
      for (std::size_t i = 0; i < teachers.size(); ++i) list += (i ? "," : "") + json_string(teachers[i]);
      if ((s = vdl_config_set(cfg.ptr, "distill.teachers", (list + "]").c_str())) != VDL_OK) return fail(s);
    }
    if ((s = vdl_distill(cfg.ptr, out.c_str())) != VDL_OK) return fail(s);
    return 0;
  }
  if (infl->parsed()) {
    if ((s = run("generic")) != VDL_OK) return fail(s);
    if ((s = vdl_inflate(cfg.ptr, teacher.c_str(), out.c_str(), unscaled ? 0 : 1)) != VDL_OK) return fail(s);
    return 0;
  }
  if (fine->parsed()) {
    if ((s = run("finetune")) != VDL_OK) return fail(s);
    if (!init.empty() && (s = vdl_config_set(cfg.ptr, "run.init", json_string(init).c_str())) != VDL_OK) {
      return fail(s);
    }
    if (!init_checkpoint.empty() &&
        (s = vdl_config_set(cfg.ptr, "run.init_checkpoint", json_string(init_checkpoint).c_str())) != VDL_OK) {
      return fail(s);
    }
    if ((s = vdl_finetune(cfg.ptr, out.c_str())) != VDL_OK) return fail(s);
    return 0;
  }
  if (eval->parsed()) {
    if ((s = run("finetune")) != VDL_OK) return fail(s);
    vdl_eval_result r{};
    const auto path = resolve_corpus(cfg.ptr, corpus);
    if ((s = vdl_evaluate(cfg.ptr, checkpoint.c_str(), path.c_str(), clips_per_video, topk, &r)) != VDL_OK) {
      return fail(s);
    }
    std::printf("{\"videos\": %zu, \"clips\": %zu, \"clip_accuracy\": %.6f, \"top1\": %.6f, \"top%zu\": %.6f}\n",
                r.videos, r.clips, r.clip_accuracy, r.top1, r.k, r.topk);
    return 0;
  }
  if (feat->parsed()) {
    if ((s = run("generic")) != VDL_OK) return fail(s);
    std::size_t rows = 0;
    const auto path = resolve_corpus(cfg.ptr, corpus);
    if ((s = vdl_export_features(cfg.ptr, checkpoint.c_str(), path.c_str(), out.c_str(), &rows)) != VDL_OK) {
      return fail(s);
    }
    std::printf("wrote %zu feature rows to %s\n", rows, out.c_str());
    return 0;
  }
  if (grad->parsed()) {
    if ((s = run("generic")) != VDL_OK) return fail(s);
    std::size_t count = 0;
    std::vector<vdl_gradcheck_entry> entries(64);
    if ((s = vdl_gradcheck(common.seed, instances, entries.data(), entries.size(), &count)) != VDL_OK) return fail(s);
    bool ok = true;
    for (std::size_t i = 0; i < count && i < entries.size(); ++i) {
      const auto& e = entries[i];
      std::printf("%-18s %3zu instances  max error %.3e  %s\n", e.name, e.instances, e.max_error,
                  e.passed ? "ok" : "FAIL");
      ok = ok && e.passed;
    }
    return ok ? 0 : VDL_NUMERIC;
  }
  return VDL_USAGE;
}
