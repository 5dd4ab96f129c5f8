#ifndef REVERB_H
#define REVERB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ReverbStatus {
  REVERB_STATUS_OK = 0,
  REVERB_STATUS_NULL_POINTER = 1,
  REVERB_STATUS_INVALID_ARGUMENT = 2,
  REVERB_STATUS_SHAPE = 3,
  REVERB_STATUS_CONFIG = 4,
  REVERB_STATUS_DATA = 5,
  REVERB_STATUS_IO = 6,
  REVERB_STATUS_CHECKPOINT = 7,
  REVERB_STATUS_NUMERIC = 8,
  REVERB_STATUS_PANIC = 9,
} ReverbStatus;

typedef enum ReverbTransform {
  REVERB_TRANSFORM_NONE = 0,
  REVERB_TRANSFORM_DFT = 1,
  REVERB_TRANSFORM_DB2 = 2,
  REVERB_TRANSFORM_HAAR = 3,
} ReverbTransform;

/**
 * A loaded model. Opaque to C.
 */
typedef struct ReverbModel ReverbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *reverb_last_error(void);

/**
 * Forward transform of a `(t, m)` sequence. `out` receives `t * m` values:
 * `t / channels` rows of `m * channels` columns.
 *
 * # Safety
 * `x` and `out` must point to `t * m` doubles.
 */
enum ReverbStatus reverb_transform_forward(enum ReverbTransform kind,
                                           const double *x,
                                           size_t t,
                                           size_t m,
                                           double *out);

/**
 * Inverse of [`reverb_transform_forward`]; `t` is the time-domain length.
 *
 * # Safety
 * `spec` and `out` must point to `t * m` doubles.
 */
enum ReverbStatus reverb_transform_inverse(enum ReverbTransform kind,
                                           const double *spec,
                                           size_t t,
                                           size_t m,
                                           double *out);

/**
 * minADE/minFDE of `k` hypotheses `(k, t_f, m)` against `gt` `(t_f, m)`.
 *
 * # Safety
 * Buffers must hold the stated number of doubles; `ade` and `fde` must be
 * writable.
 */
enum ReverbStatus reverb_min_ade_fde(const double *preds,
                                     size_t k,
                                     size_t t_f,
                                     size_t m,
                                     const double *gt,
                                     double *ade,
                                     double *fde);

/**
 * Normalized reverberation curve of a `(t_p, t_f)` kernel into `out`.
 *
 * # Safety
 * `r` and `out` must point to `t_p * t_f` doubles.
 */
enum ReverbStatus reverb_curve_non(const double *r, size_t t_p, size_t t_f, double *out);

/**
 * Loads a model from a run configuration and a checkpoint stem. A null
 * `config` uses the default model. On success `*out` owns the model; free
 * it with [`reverb_model_free`].
 *
 * # Safety
 * `config` must be null or a NUL-terminated string; `checkpoint` must be a
 * NUL-terminated string; `out` must be writable.
 */
enum ReverbStatus reverb_model_load(const char *config,
                                    const char *checkpoint,
                                    struct ReverbModel **out);

/**
 * # Safety
 * `model` must be null or a pointer from [`reverb_model_load`] not yet freed.
 */
void reverb_model_free(struct ReverbModel *model);

/**
 * History length, horizon and hypothesis count of a loaded model.
 *
 * # Safety
 * `model` must be live; the outputs must be writable.
 */
enum ReverbStatus reverb_model_dims(const struct ReverbModel *model,
                                    size_t *t_h,
                                    size_t *t_f,
                                    size_t *k_g);

/**
 * Predicts `k_g` futures in world coordinates. `ego` is `(t_h, 2)`,
 * `neighbors` is `n` consecutive `(t_h, 2)` tracks (may be null when
 * `n == 0`), and `out` receives `(k_g, t_f, 2)` values.
 *
 * # Safety
 * `model` must be live and buffers must hold the stated number of doubles.
 */
enum ReverbStatus reverb_model_predict(const struct ReverbModel *model,
                                       const double *ego,
                                       const double *neighbors,
                                       size_t n,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REVERB_H */
