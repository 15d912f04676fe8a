#ifndef LEXDMV_H
#define LEXDMV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum LexdmvStatus {
  LEXDMV_STATUS_OK = 0,
  LEXDMV_STATUS_NULL_POINTER = 1,
  LEXDMV_STATUS_INVALID_UTF8 = 2,
  LEXDMV_STATUS_IO = 3,
  LEXDMV_STATUS_FORMAT = 4,
  LEXDMV_STATUS_VERSION = 5,
  LEXDMV_STATUS_UNKNOWN_TAG = 6,
  LEXDMV_STATUS_INVALID_ARGUMENT = 7,
  LEXDMV_STATUS_INTERNAL = 8,
} LexdmvStatus;

/**
 * A loaded model. Only ever handled through pointers.
 */
typedef struct LexdmvModel LexdmvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model file. On success `*out` owns a handle that must be
 * released with [`lexdmv_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LexdmvStatus lexdmv_model_load(const char *path, struct LexdmvModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`lexdmv_model_load`] and not be used afterwards.
 */
void lexdmv_model_free(struct LexdmvModel *model);

/**
 * Number of tokens in the model's lexicon, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t lexdmv_model_vocab_size(const struct LexdmvModel *model);

/**
 * Parses `n` tokens given as parallel word and tag arrays, writing 1-based
 * heads (0 = root) into `heads_out`, which must hold `n` entries.
 * Punctuation tokens are attached to the root word.
 *
 * # Safety
 * `words` and `tags` must point to `n` NUL-terminated strings and
 * `heads_out` to `n` writable values.
 */
enum LexdmvStatus lexdmv_parse(const struct LexdmvModel *model,
                               const char *const *words,
                               const char *const *tags,
                               size_t n,
                               size_t *heads_out);

/**
 * Log-probability of a sentence summed over all projective trees. No
 * punctuation is removed.
 *
 * # Safety
 * As for [`lexdmv_parse`]; `out` must be a valid pointer.
 */
enum LexdmvStatus lexdmv_sentence_log_prob(const struct LexdmvModel *model,
                                           const char *const *words,
                                           const char *const *tags,
                                           size_t n,
                                           double *out);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *lexdmv_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *lexdmv_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LEXDMV_H */
