#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include "checkpoint.hpp"
#include "config.hpp"
#include "error.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "pipeline.hpp"
#include "vidistill/vidistill.h"

using namespace vidistill;

struct vdl_config {
  config::Phase phase;
  nlohmann::json overlay;  // user document plus overrides
  config::RunConfig resolved;
};

struct vdl_checkpoint {
  io::Checkpoint checkpoint;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
vdl_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return VDL_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return static_cast<vdl_status>(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return VDL_DATA;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return VDL_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return VDL_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) usage_error(what, " must not be null");
}

config::Phase parse_phase(const char* phase) {
  const std::string p = phase ? phase : "generic";
  if (p == "generic") return config::Phase::kGeneric;
  if (p == "teacher") return config::Phase::kTeacher;
  if (p == "distill") return config::Phase::kDistill;
  if (p == "finetune") return config::Phase::kFinetune;
  usage_error("unknown phase '", p, "' (expected generic, teacher, distill or finetune)");
}

void write_string(const std::string& s, char* buffer, std::size_t capacity, std::size_t* needed) {
  if (needed) *needed = s.size() + 1;
  if (capacity == 0) return;
  require(buffer, "buffer");
  const std::size_t n = std::min(capacity - 1, s.size());
  std::memcpy(buffer, s.data(), n);
  buffer[n] = '\0';
}

const io::Checkpoint& ck_of(const vdl_checkpoint* c) {
  require(c, "checkpoint");
  return c->checkpoint;
}

data::Corpus parse_corpus(const std::string& name) {
  for (auto c : {data::Corpus::kTeacherImages, data::Corpus::kTeacherImagesVal, data::Corpus::kTeacherScenes,
                 data::Corpus::kTeacherScenesVal, data::Corpus::kDistillVideos, data::Corpus::kTargetTrain,
                 data::Corpus::kTargetTest}) {
    std::string file(data::corpus_file_name(c));
    if (name == file || name + ".mshv" == file) return c;
  }
  usage_error("unknown corpus '", name, "'");
}

}  // namespace

extern "C" {

const char* vdl_version(void) { return "1.0.0"; }

const char* vdl_last_error(void) { return g_last_error.c_str(); }

void vdl_set_verbose(int verbose) { pipeline::set_verbose(verbose != 0); }

vdl_status vdl_config_load(const char* path, const char* phase, vdl_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    auto c = std::make_unique<vdl_config>();
    c->phase = parse_phase(phase);
    c->overlay = nlohmann::json::object();
    if (path && *path) {
      c->resolved = config::load_config(path, c->phase);
      std::ifstream f(path);
      c->overlay = nlohmann::json::parse(f);
    } else {
      c->resolved = config::defaults(c->phase);
    }
    *out = c.release();
  });
}

void vdl_config_free(vdl_config* config) { delete config; }

vdl_status vdl_config_set(vdl_config* config, const char* key, const char* json_value) {
  return guarded([&] {
    require(config, "config");
    require(key, "key");
    require(json_value, "value");
    const std::string k = key;
    const auto dot = k.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == k.size()) {
      usage_error("config key '", k, "' must look like section.name");
    }
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(json_value);
    } catch (const nlohmann::json::parse_error&) {
      usage_error("value for ", k, " is not valid JSON: ", json_value);
    }
    auto overlay = config->overlay;
    overlay[k.substr(0, dot)][k.substr(dot + 1)] = value;
    config->resolved = config::parse_config(overlay.dump(), config->phase);
    config->overlay = std::move(overlay);
  });
}

vdl_status vdl_config_json(const vdl_config* config, char* buffer, size_t capacity, size_t* needed) {
  return guarded([&] {
    require(config, "config");
    write_string(config->resolved.to_json(), buffer, capacity, needed);
  });
}

vdl_status vdl_config_corpus_path(const vdl_config* config, const char* corpus, char* buffer, size_t capacity,
                                  size_t* needed) {
  return guarded([&] {
    require(config, "config");
    require(corpus, "corpus");
    write_string(pipeline::corpus_path(config->resolved, parse_corpus(corpus)).string(), buffer, capacity, needed);
  });
}

vdl_status vdl_generate_data(const vdl_config* config) {
  return guarded([&] {
    require(config, "config");
    pipeline::generate_data(config->resolved);
  });
}

vdl_status vdl_train_teacher(const vdl_config* config, const char* out) {
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    pipeline::train_teacher(config->resolved, out);
  });
}

vdl_status vdl_distill(const vdl_config* config, const char* out) {
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    pipeline::distill_pretrain(config->resolved, out);
  });
}

vdl_status vdl_inflate(const vdl_config* config, const char* teacher, const char* out, int scaled) {
  return guarded([&] {
    require(config, "config");
    require(teacher, "teacher");
    require(out, "out");
    pipeline::inflate_checkpoint(config->resolved, teacher, out, scaled != 0);
  });
}

vdl_status vdl_finetune(const vdl_config* config, const char* out) {
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    pipeline::finetune(config->resolved, out);
  });
}

vdl_status vdl_evaluate(const vdl_config* config, const char* checkpoint, const char* corpus,
                        size_t clips_per_video, size_t k, vdl_eval_result* result) {
  return guarded([&] {
    require(config, "config");
    require(checkpoint, "checkpoint");
    require(corpus, "corpus");
    require(result, "result");
    const auto& run = config->resolved.run;
    const auto r = pipeline::evaluate(config->resolved, checkpoint, corpus,
                                      clips_per_video ? clips_per_video : run.clips_per_video, k ? k : run.topk);
    *result = {r.clips, r.videos, r.k, r.clip_accuracy, r.top1, r.topk};
  });
}

vdl_status vdl_export_features(const vdl_config* config, const char* checkpoint, const char* corpus,
                               const char* out, size_t* rows) {
  return guarded([&] {
    require(config, "config");
    require(checkpoint, "checkpoint");
    require(corpus, "corpus");
    require(out, "out");
    const auto n = pipeline::export_features(config->resolved, checkpoint, corpus, out);
    if (rows) *rows = n;
  });
}

vdl_status vdl_gradcheck(uint64_t seed, size_t instances, vdl_gradcheck_entry* entries, size_t capacity,
                         size_t* count) {
  return guarded([&] {
    if (instances == 0) usage_error("gradcheck needs at least one instance");
    if (capacity > 0) require(entries, "entries");
    const auto results = gradcheck::run_suite(seed, instances);
    if (count) *count = results.size();
    for (std::size_t i = 0; i < results.size() && i < capacity; ++i) {
      auto& e = entries[i];
      std::memset(e.name, 0, sizeof(e.name));
      std::strncpy(e.name, results[i].name.c_str(), sizeof(e.name) - 1);
      e.instances = results[i].instances;
      e.max_error = results[i].max_error;
      e.passed = results[i].passed ? 1 : 0;
    }
  });
}

vdl_status vdl_checkpoint_load(const char* path, vdl_checkpoint** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    auto c = std::make_unique<vdl_checkpoint>();
    c->checkpoint = io::load_checkpoint(path);
    *out = c.release();
  });
}

vdl_status vdl_checkpoint_save(const vdl_checkpoint* checkpoint, const char* path) {
  return guarded([&] {
    require(path, "path");
    io::save_checkpoint(path, ck_of(checkpoint));
  });
}

void vdl_checkpoint_free(vdl_checkpoint* checkpoint) { delete checkpoint; }

const char* vdl_checkpoint_model(const vdl_checkpoint* c) { return c ? c->checkpoint.meta.model.c_str() : nullptr; }
uint32_t vdl_checkpoint_epoch(const vdl_checkpoint* c) { return c ? c->checkpoint.meta.epoch : 0; }
uint64_t vdl_checkpoint_config_hash(const vdl_checkpoint* c) { return c ? c->checkpoint.meta.config_hash : 0; }
uint64_t vdl_checkpoint_seed(const vdl_checkpoint* c) { return c ? c->checkpoint.meta.seed : 0; }
size_t vdl_checkpoint_entry_count(const vdl_checkpoint* c) { return c ? c->checkpoint.entries.size() : 0; }

const char* vdl_checkpoint_entry_name(const vdl_checkpoint* c, size_t index) {
  if (!c || index >= c->checkpoint.entries.size()) return nullptr;
  return c->checkpoint.entries[index].first.c_str();
}

size_t vdl_checkpoint_entry_rank(const vdl_checkpoint* c, size_t index) {
  if (!c || index >= c->checkpoint.entries.size()) return 0;
  return c->checkpoint.entries[index].second.rank();
}

size_t vdl_checkpoint_entry_dim(const vdl_checkpoint* c, size_t index, size_t axis) {
  if (!c || index >= c->checkpoint.entries.size()) return 0;
  const auto& t = c->checkpoint.entries[index].second;
  return axis < t.rank() ? t.dim(axis) : 0;
}

const float* vdl_checkpoint_entry_data(const vdl_checkpoint* c, size_t index) {
  if (!c || index >= c->checkpoint.entries.size()) return nullptr;
  return c->checkpoint.entries[index].second.data().data();
}

}  // extern "C"
