#ifndef MDTAL_H
#define MDTAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum MdtalStatus {
  MDTAL_STATUS_OK = 0,
  MDTAL_STATUS_NULL_POINTER = 1,
  MDTAL_STATUS_INVALID_ARGUMENT = 2,
  MDTAL_STATUS_OUT_OF_RANGE = 3,
  MDTAL_STATUS_IO = 4,
  MDTAL_STATUS_PARSE = 5,
  MDTAL_STATUS_CHECKPOINT = 6,
  MDTAL_STATUS_CONFIG = 7,
  MDTAL_STATUS_NON_FINITE = 8,
  MDTAL_STATUS_PANIC = 9,
} MdtalStatus;

/*
 A loaded model checkpoint.
 */
typedef struct MdtalModel MdtalModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *mdtal_version(void);

/*
 Message of the last failed call on this thread, or NULL. Valid until
 the next failing call on the same thread.
 */
const char *mdtal_last_error_message(void);

/*
 Release a string returned by this library. NULL is ignored.

 # Safety
 `s` must be NULL or a pointer obtained from an `out_json` parameter that
 has not been freed yet.
 */
void mdtal_string_free(char *s);

/*
 Time-token index `round((n_bins - 1) * tau / duration)`.

 # Safety
 `out_bin` must be writable.
 */
enum MdtalStatus mdtal_time_encode(double tau, double duration, uint32_t n_bins, uint32_t *out_bin);

/*
 Timestamp `duration * bin / (n_bins - 1)`.

 # Safety
 `out_tau` must be writable.
 */
enum MdtalStatus mdtal_time_decode(uint32_t bin, double duration, uint32_t n_bins, double *out_tau);

/*
 Temporal IoU of `[s1, e1]` and `[s2, e2]`.

 # Safety
 `out` must be writable.
 */
enum MdtalStatus mdtal_tiou(double s1, double e1, double s2, double e2, double *out);

/*
 Normalized step weight `w_t` for `t` in `1..=n_steps`.

 # Safety
 `out` must be writable.
 */
enum MdtalStatus mdtal_step_weight(uint32_t t, uint32_t n_steps, double *out);

/*
 Soft IoU between the expected segment of two time-bin distributions of
 length `n_bins` and the ground-truth bins.

 # Safety
 `p_start` and `p_end` must point to `n_bins` readable doubles; `out` must
 be writable.
 */
enum MdtalStatus mdtal_soft_iou(const double *p_start,
                                const double *p_end,
                                uintptr_t n_bins,
                                uint32_t gt_start,
                                uint32_t gt_end,
                                double *out);

/*
 Load a model checkpoint into a new handle.

 # Safety
 `path` must be a NUL-terminated string; `out_model` must be writable.
 */
enum MdtalStatus mdtal_model_load(const char *path, struct MdtalModel **out_model);

/*
 Release a model handle. NULL is ignored.

 # Safety
 `model` must be NULL or a handle from [`mdtal_model_load`] not yet freed.
 */
void mdtal_model_free(struct MdtalModel *model);

/*
 JSON object with the model architecture, task settings and training metadata.

 # Safety
 `model` must be a live handle; `out_json` must be writable.
 */
enum MdtalStatus mdtal_model_info(const struct MdtalModel *model, char **out_json);

/*
 Decode one video given row-major frame features of shape
 `n_frames x d_feat`. Writes a JSON array of detections with fields
 `video` (empty), `class`, `start`, `end`, `score`. `n_steps = 0` uses
 the checkpoint's decoding settings.

 # Safety
 `features` must point to `n_frames * d_feat` readable doubles;
 `model` must be a live handle; `out_json` must be writable.
 */
enum MdtalStatus mdtal_model_generate(const struct MdtalModel *model,
                                      const double *features,
                                      uintptr_t n_frames,
                                      uintptr_t d_feat,
                                      uint32_t n_steps,
                                      char **out_json);

/*
 Decode and score every video of a dataset JSONL file. Writes a JSON
 object with `report`, `predictions` and `dropped`.

 # Safety
 `model` must be a live handle; `dataset_path` a NUL-terminated string;
 `out_json` writable.
 */
enum MdtalStatus mdtal_model_evaluate(const struct MdtalModel *model,
                                      const char *dataset_path,
                                      uint32_t n_steps,
                                      char **out_json);

/*
 Score a detection JSONL file against the ground truth of a dataset
 JSONL file. `profile` is `"rtl"` or `"closed-set"`, `grid` is
 `"thumos"` or `"anet"` (used for closed-set only).

 # Safety
 All string arguments must be NUL-terminated; `out_json` writable.
 */
enum MdtalStatus mdtal_eval_jsonl(const char *predictions_path,
                                  const char *dataset_path,
                                  const char *profile,
                                  const char *grid,
                                  char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDTAL_H */
