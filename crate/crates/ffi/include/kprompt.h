#ifndef KPROMPT_H
#define KPROMPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum KpStatus {
  KP_STATUS_OK = 0,
  KP_STATUS_NULL_POINTER = 1,
  KP_STATUS_INVALID_ARGUMENT = 2,
  KP_STATUS_OUT_OF_RANGE = 3,
  KP_STATUS_IO = 4,
  KP_STATUS_MODEL = 5,
  KP_STATUS_PANIC = 6,
} KpStatus;

// Visibility matrix of one compiled input.
typedef struct KpMask KpMask;

// A trained run directory: model, vocabulary and compiled test split.
typedef struct KpRun KpRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next kprompt call on the same thread.
const char *kp_last_error(void);

// HR@k and NDCG@k for a target at 1-based `rank`; `rank` 0 means the
// target was not ranked.
//
// # Safety
// `hr` and `ndcg` point to writable doubles.
enum KpStatus kp_ndcg_hr(size_t rank, size_t k, double *hr, double *ndcg);

// Decodes a mask in its serialized base64 form.
//
// # Safety
// `b64` is a nul-terminated string; `out` points to writable storage.
enum KpStatus kp_mask_from_base64(const char *b64, struct KpMask **out);

// Side length of the mask, or 0 for a null handle.
//
// # Safety
// `mask` is null or a live handle.
size_t kp_mask_size(const struct KpMask *mask);

// Whether token `i` may attend to token `j`.
//
// # Safety
// `mask` is a live handle; `visible` points to a writable bool.
enum KpStatus kp_mask_visible(const struct KpMask *mask, size_t i, size_t j, bool *visible);

// # Safety
// `mask` is null or a handle not yet freed.
void kp_mask_free(struct KpMask *mask);

// Opens a trained run directory.
//
// # Safety
// `dir` is a nul-terminated path; `out` points to writable storage.
enum KpStatus kp_run_open(const char *dir, struct KpRun **out);

// Number of test records, or 0 for a null handle.
//
// # Safety
// `run` is null or a live handle.
size_t kp_run_num_records(const struct KpRun *run);

// Mask of test record `index`; free it with [`kp_mask_free`].
//
// # Safety
// `run` is a live handle; `out` points to writable storage.
enum KpStatus kp_run_mask(const struct KpRun *run, size_t index, struct KpMask **out);

// Top-`k` items for test record `index` as a JSON object
// `{"user", "target", "topk": [[item, score], ...]}`. Free the string
// with [`kp_string_free`].
//
// # Safety
// `run` is a live handle; `out` points to writable storage.
enum KpStatus kp_run_recommend(const struct KpRun *run,
                               size_t index,
                               size_t k,
                               bool use_mask,
                               char **out);

// # Safety
// `run` is null or a handle not yet freed.
void kp_run_free(struct KpRun *run);

// # Safety
// `s` is null or a string returned by this library and not yet freed.
void kp_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KPROMPT_H */
