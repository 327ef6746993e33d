#ifndef VIDISTILL_VIDISTILL_H
#define VIDISTILL_VIDISTILL_H

/* C interface to the vidistill library. Functions return a vdl_status; on
 * failure vdl_last_error() describes the problem until the next call on the
 * same thread. Handles are opaque and owned by the caller. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define VDL_API __declspec(dllexport)
#else
#define VDL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vdl_status {
  VDL_OK = 0,
  VDL_USAGE = 1,   /* bad arguments or configuration */
  VDL_DATA = 2,    /* missing or malformed files */
  VDL_NUMERIC = 3, /* non-finite loss or similar numerical failure */
  VDL_INTERNAL = 4
} vdl_status;

typedef struct vdl_config vdl_config;
typedef struct vdl_checkpoint vdl_checkpoint;

VDL_API const char* vdl_version(void);
VDL_API const char* vdl_last_error(void);
VDL_API void vdl_set_verbose(int verbose);

/* --- Configuration ------------------------------------------------------ */

/* phase: "generic", "teacher", "distill" or "finetune" (selects optimizer
 * defaults). path may be NULL or empty for pure defaults. */
VDL_API vdl_status vdl_config_load(const char* path, const char* phase, vdl_config** out);
VDL_API void vdl_config_free(vdl_config* config);
/* Overrides one key, e.g. ("run.seed", "7") or ("distill.teachers",
 * "[\"t.ckpt\"]"). The value is JSON text. */
VDL_API vdl_status vdl_config_set(vdl_config* config, const char* key, const char* json_value);
/* Writes the effective configuration as JSON, truncated to fit like
 * snprintf. *needed receives the full size
 * including the terminating zero; buffer may be NULL when capacity is 0. */
VDL_API vdl_status vdl_config_json(const vdl_config* config, char* buffer, size_t capacity, size_t* needed);
/* Path of a corpus file ("teacher-images", "target-actions-test", ...)
 * under data.dir, written like vdl_config_json. */
VDL_API vdl_status vdl_config_corpus_path(const vdl_config* config, const char* corpus, char* buffer,
                                          size_t capacity, size_t* needed);

/* --- Pipeline ------------------------------------------------------------ */

VDL_API vdl_status vdl_generate_data(const vdl_config* config);
VDL_API vdl_status vdl_train_teacher(const vdl_config* config, const char* out);
VDL_API vdl_status vdl_distill(const vdl_config* config, const char* out);
VDL_API vdl_status vdl_inflate(const vdl_config* config, const char* teacher, const char* out, int scaled);
VDL_API vdl_status vdl_finetune(const vdl_config* config, const char* out);

typedef struct vdl_eval_result {
  size_t clips;
  size_t videos;
  size_t k;
  double clip_accuracy;
  double top1;
  double topk;
} vdl_eval_result;

/* clips_per_video or k of 0 take run.clips_per_video / run.topk. */
VDL_API vdl_status vdl_evaluate(const vdl_config* config, const char* checkpoint, const char* corpus,
                                size_t clips_per_video, size_t k, vdl_eval_result* result);
VDL_API vdl_status vdl_export_features(const vdl_config* config, const char* checkpoint, const char* corpus,
                                       const char* out, size_t* rows);

typedef struct vdl_gradcheck_entry {
  char name[32];
  size_t instances;
  double max_error;
  int passed;
} vdl_gradcheck_entry;

/* Runs the finite-difference suite. Fills up to `capacity` entries and
 * stores the number of checks in *count. */
VDL_API vdl_status vdl_gradcheck(uint64_t seed, size_t instances, vdl_gradcheck_entry* entries,
                                 size_t capacity, size_t* count);

/* --- Checkpoints --------------------------------------------------------- */

VDL_API vdl_status vdl_checkpoint_load(const char* path, vdl_checkpoint** out);
VDL_API vdl_status vdl_checkpoint_save(const vdl_checkpoint* checkpoint, const char* path);
VDL_API void vdl_checkpoint_free(vdl_checkpoint* checkpoint);
VDL_API const char* vdl_checkpoint_model(const vdl_checkpoint* checkpoint);
VDL_API uint32_t vdl_checkpoint_epoch(const vdl_checkpoint* checkpoint);
VDL_API uint64_t vdl_checkpoint_config_hash(const vdl_checkpoint* checkpoint);
VDL_API uint64_t vdl_checkpoint_seed(const vdl_checkpoint* checkpoint);
VDL_API size_t vdl_checkpoint_entry_count(const vdl_checkpoint* checkpoint);
/* NULL when index is out of range. */
VDL_API const char* vdl_checkpoint_entry_name(const vdl_checkpoint* checkpoint, size_t index);
VDL_API size_t vdl_checkpoint_entry_rank(const vdl_checkpoint* checkpoint, size_t index);
VDL_API size_t vdl_checkpoint_entry_dim(const vdl_checkpoint* checkpoint, size_t index, size_t axis);
VDL_API const float* vdl_checkpoint_entry_data(const vdl_checkpoint* checkpoint, size_t index);

#ifdef __cplusplus
}
#endif

#endif
