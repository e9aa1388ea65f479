#ifndef PRM_H
#define PRM_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PrmStatus {
  PRM_STATUS_OK = 0,
  PRM_STATUS_NULL_POINTER = 1,
  PRM_STATUS_INVALID_UTF8 = 2,
  PRM_STATUS_INVALID_ARGUMENT = 3,
  PRM_STATUS_IO = 4,
  PRM_STATUS_PARSE = 5,
  PRM_STATUS_DIMENSION_MISMATCH = 6,
  PRM_STATUS_INTERNAL = 7,
} PrmStatus;

/**
 * Trained scorer. Opaque to C callers.
 */
typedef struct PrmModel PrmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *prm_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into the library from this thread.
 */
const char *prm_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library, or be null.
 */
void prm_string_free(char *s);

/**
 * Loads `params.bin` and `params.json` from a training output directory.
 *
 * # Safety
 * `train_dir` must be a valid C string; `out` a valid pointer.
 */
enum PrmStatus prm_model_load(const char *train_dir, struct PrmModel **out);

/**
 * Untrained model with all-zero weights; every score is 0.5.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PrmStatus prm_model_zeros(size_t dimension, struct PrmModel **out);

/**
 * # Safety
 * `model` must come from `prm_model_load`/`prm_model_zeros`, or be null.
 */
void prm_model_free(struct PrmModel *model);

/**
 * Feature dimension, or 0 for a null model.
 *
 * # Safety
 * `model` must be a live model or null.
 */
size_t prm_model_dimension(const struct PrmModel *model);

/**
 * Score of one (statement, partial program) pair.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum PrmStatus prm_model_score_text(const struct PrmModel *model,
                                    const char *statement,
                                    const char *text,
                                    double *out_score);

/**
 * Scores a full program. `mode` 0 averages over step prefixes, 1 scores
 * the final program only.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum PrmStatus prm_model_score_trajectory(const struct PrmModel *model,
                                          const char *statement,
                                          const char *program,
                                          uint32_t mode,
                                          double *out_score);

/**
 * Splits a program into steps and writes a JSON description to `out_json`.
 * Spans are byte offsets into the input.
 *
 * # Safety
 * `program` must be a valid C string; `out_json` a valid pointer.
 */
enum PrmStatus prm_decompose_json(const char *program, char **out_json);

/**
 * `p_plus / (p_plus + p_minus)`.
 *
 * # Safety
 * `out_score` must be a valid pointer.
 */
enum PrmStatus prm_generative_score(double p_plus, double p_minus, double *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRM_H */
