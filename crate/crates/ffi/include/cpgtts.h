#ifndef CPGTTS_H
#define CPGTTS_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CpgStatus {
  CPG_STATUS_OK = 0,
  CPG_STATUS_NULL_POINTER = 1,
  CPG_STATUS_INVALID_ARGUMENT = 2,
  CPG_STATUS_CONFIG = 3,
  CPG_STATUS_CONTRACT = 4,
  CPG_STATUS_LOOKUP = 5,
  CPG_STATUS_IO = 6,
  CPG_STATUS_PARSE = 7,
  CPG_STATUS_NUMERIC = 8,
  /**
   * The caller's buffer is too small; the required size was written.
   */
  CPG_STATUS_BUFFER_TOO_SMALL = 9,
  CPG_STATUS_PANIC = 10,
} CpgStatus;

/**
 * A generated or loaded corpus.
 */
typedef struct CpgCorpus CpgCorpus;

/**
 * A trained or loaded model.
 */
typedef struct CpgModel CpgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cpg_version(void);

/**
 * Bytes needed for the last error message of this thread, terminator
 * included; 0 when no call has failed.
 */
size_t cpg_last_error_length(void);

/**
 * Copies the last error message of this thread into `buf`.
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum CpgStatus cpg_last_error_message(char *buf, size_t len);

/**
 * Generates the toy corpus described by the `[corpus]` section of
 * `config_toml` (NULL for the defaults).
 *
 * # Safety
 * `config_toml` is NULL or a NUL-terminated string; `out` is writable.
 */
enum CpgStatus cpg_corpus_generate(const char *config_toml, uint64_t seed, struct CpgCorpus **out);

/**
 * # Safety
 * `dir` is a NUL-terminated path; `out` is writable.
 */
enum CpgStatus cpg_corpus_load(const char *dir, struct CpgCorpus **out);

/**
 * # Safety
 * `corpus` is a live handle; `dir` is a NUL-terminated path.
 */
enum CpgStatus cpg_corpus_save(const struct CpgCorpus *corpus, const char *dir);

/**
 * # Safety
 * `corpus` is a live handle; the outputs are writable or NULL.
 */
enum CpgStatus cpg_corpus_info(const struct CpgCorpus *corpus,
                               size_t *languages,
                               size_t *speakers,
                               size_t *utterances);

/**
 * # Safety
 * `corpus` is NULL or a handle not yet freed.
 */
void cpg_corpus_free(struct CpgCorpus *corpus);

/**
 * Trains the `[model]` variant on the corpus's training split with the
 * `[train]` settings of `config_toml` (NULL for the desk defaults).
 *
 * # Safety
 * `corpus` is a live handle; `config_toml` is NULL or NUL-terminated; `out` is writable.
 */
enum CpgStatus cpg_train(const struct CpgCorpus *corpus,
                         const char *config_toml,
                         uint64_t seed,
                         struct CpgModel **out);

/**
 * # Safety
 * `path` is NUL-terminated; `out` is writable.
 */
enum CpgStatus cpg_model_load(const char *path, struct CpgModel **out);

/**
 * # Safety
 * `model` is a live handle; `path` is NUL-terminated.
 */
enum CpgStatus cpg_model_save(const struct CpgModel *model, const char *path);

/**
 * # Safety
 * `model` is NULL or a handle not yet freed.
 */
void cpg_model_free(struct CpgModel *model);

/**
 * Synthesizes `text` (letters `a`..`z`) in `language` with `speaker`.
 *
 * Writes `n_frames` and `frame_dim` first; when `frames` is NULL or
 * `capacity < n_frames * frame_dim` nothing else is written and
 * `CPG_STATUS_BUFFER_TOO_SMALL` is returned, so a first call with a NULL
 * buffer sizes the second. `stopped` (optional) reports whether the stop
 * head fired before the step limit.
 *
 * # Safety
 * Handles are live; `text` is NUL-terminated; `frames` holds `capacity`
 * doubles; the size outputs are writable; `stopped` is writable or NULL.
 */
enum CpgStatus cpg_synthesize(const struct CpgModel *model,
                              const struct CpgCorpus *corpus,
                              const char *text,
                              size_t language,
                              size_t speaker,
                              double *frames,
                              size_t capacity,
                              size_t *n_frames,
                              size_t *frame_dim,
                              bool *stopped);

/**
 * Mean character error rate of `model` over the corpus's test split.
 *
 * # Safety
 * Handles are live; `mean_cer` is writable; `skips` is writable or NULL.
 */
enum CpgStatus cpg_evaluate(const struct CpgModel *model,
                            const struct CpgCorpus *corpus,
                            double *mean_cer,
                            size_t *skips);

/**
 * Edit distance between two symbol sequences divided by the reference length.
 *
 * # Safety
 * `reference` holds `ref_len` values, `hypothesis` holds `hyp_len` values
 * (either may be NULL when its length is 0), and `out` is writable.
 */
enum CpgStatus cpg_cer(const uint32_t *reference,
                       size_t ref_len,
                       const uint32_t *hypothesis,
                       size_t hyp_len,
                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPGTTS_H */
