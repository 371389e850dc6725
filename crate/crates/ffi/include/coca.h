#ifndef COCA_H
#define COCA_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum CocaStatus {
  COCA_STATUS_OK = 0,
  COCA_STATUS_NULL_POINTER = 1,
  COCA_STATUS_INVALID_ARGUMENT = 2,
  COCA_STATUS_SHAPE_MISMATCH = 3,
  COCA_STATUS_CONFIG = 4,
  COCA_STATUS_IO = 5,
  COCA_STATUS_FORMAT = 6,
  COCA_STATUS_UTF8 = 7,
  COCA_STATUS_INTERNAL = 8,
} CocaStatus;

/**
 * A loaded source model.
 */
typedef struct CocaModel CocaModel;

/**
 * Online co-adaptation state for an anchor and an auxiliary model.
 */
typedef struct CocaSession CocaSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *coca_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *coca_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CocaStatus coca_model_load(const char *path, struct CocaModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`coca_model_load`] and not be used afterwards.
 */
void coca_model_free(struct CocaModel *model);

/**
 * Reports the number of classes, flattened input width and parameter count.
 *
 * # Safety
 * `model` must be a live handle; each output pointer may be null to skip it.
 */
enum CocaStatus coca_model_info(const struct CocaModel *model,
                                size_t *num_classes,
                                size_t *input_len,
                                size_t *param_count);

/**
 * Computes `rows x num_classes` logits for `rows x input_len` features.
 *
 * # Safety
 * `features` must hold `rows * input_len` values and `logits` room for
 * `logits_len` values.
 */
enum CocaStatus coca_model_predict(const struct CocaModel *model,
                                   const double *features,
                                   size_t rows,
                                   double *logits,
                                   size_t logits_len);

/**
 * Starts a co-adaptation session from copies of two models. The model with
 * more parameters becomes the anchor regardless of argument order.
 *
 * # Safety
 * Both models must be live handles and `out` a valid pointer.
 */
enum CocaStatus coca_session_new(const struct CocaModel *first,
                                 const struct CocaModel *second,
                                 double lr_first,
                                 double lr_second,
                                 double momentum,
                                 struct CocaSession **out);

/**
 * Releases a session. Null is ignored.
 *
 * # Safety
 * `session` must come from [`coca_session_new`] and not be used afterwards.
 */
void coca_session_free(struct CocaSession *session);

/**
 * Adapts on one unlabeled batch and writes the combined prediction of every
 * row into `predictions` (length `rows`).
 *
 * # Safety
 * `features` must hold `rows * input_len` values and `predictions` room for
 * `rows` values.
 */
enum CocaStatus coca_session_step(struct CocaSession *session,
                                  const double *features,
                                  size_t rows,
                                  size_t *predictions);

/**
 * Current temperature of the session.
 *
 * # Safety
 * `session` must be a live handle and `tau` a valid pointer.
 */
enum CocaStatus coca_session_tau(const struct CocaSession *session, double *tau);

/**
 * Runs a JSON experiment config and returns the report as JSON. The string
 * must be released with [`coca_string_free`].
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `report_json` a valid
 * pointer.
 */
enum CocaStatus coca_run_json(const char *config_json, char **report_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void coca_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COCA_H */
