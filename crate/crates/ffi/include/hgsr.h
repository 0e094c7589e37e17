#ifndef HGSR_H
#define HGSR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum HgsrStatus {
  HGSR_STATUS_OK = 0,
  HGSR_STATUS_NULL_ARGUMENT = 1,
  HGSR_STATUS_INVALID_UTF8 = 2,
  HGSR_STATUS_IO = 3,
  HGSR_STATUS_INVALID_INPUT = 4,
  HGSR_STATUS_MODEL = 5,
  HGSR_STATUS_PANIC = 6,
} HgsrStatus;

// A loaded model; opaque to C callers.
typedef struct HgsrModel HgsrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hgsr_version(void);

// Message for the most recent failure on this thread; empty if none.
// Valid until the next failing call on the same thread.
const char *hgsr_last_error(void);

// Loads the selected model of a run directory into `*out`.
//
// # Safety
// `model_dir` must be a NUL-terminated string and `out` a writable pointer.
enum HgsrStatus hgsr_model_load(const char *model_dir, struct HgsrModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from `hgsr_model_load` and not be used afterwards.
void hgsr_model_free(struct HgsrModel *model);

// Model kind of a loaded handle: `p`, `t` or `v`, as a static string.
//
// # Safety
// `model` must be a live handle or null.
const char *hgsr_model_kind(const struct HgsrModel *model);

// Predicts one sentence given as a JSON record (gold fields optional) and
// writes the prediction JSON to `*out`.
//
// # Safety
// Pointers must be valid; `*out` must be freed with `hgsr_string_free`.
enum HgsrStatus hgsr_predict_json(const struct HgsrModel *model,
                                  const char *sentence_json,
                                  char **out);

// Builds the sentence graph under the model's settings and writes DOT text to `*out`.
//
// # Safety
// Pointers must be valid; `*out` must be freed with `hgsr_string_free`.
enum HgsrStatus hgsr_graph_dot(const struct HgsrModel *model,
                               const char *sentence_json,
                               char **out);

// Writes a synthetic JSON Lines corpus of `n` sentences to `path`.
//
// # Safety
// `path` must be a NUL-terminated string.
enum HgsrStatus hgsr_generate_corpus(const char *path, size_t n, uint64_t seed, double noise_rate);

// Releases a string returned through an `out` parameter; null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void hgsr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HGSR_H */
