/* C interface to the covmeta meta-learning library. Generated by cbindgen; do not edit. */

#ifndef COVMETA_H
#define COVMETA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome. Zero is success; everything else is an error whose
 * message is available from `covmeta_last_error`.
 */
typedef enum CovmetaStatus {
  /**
   * The call succeeded.
   */
  COVMETA_STATUS_OK = 0,
  /**
   * A pointer was null, a string was not valid UTF-8, or an argument
   * was out of range or inconsistent.
   */
  COVMETA_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The computation produced a non-finite value.
   */
  COVMETA_STATUS_NUMERICAL = 2,
  /**
   * The file could not be read, written, or understood.
   */
  COVMETA_STATUS_IO = 3,
  /**
   * An internal invariant failed (a bug; please report it).
   */
  COVMETA_STATUS_INTERNAL = 4,
} CovmetaStatus;

/**
 * A benchmark meta-distribution (covariate modes, weights, hypothesis
 * rule) built from a data seed.
 */
typedef struct CovmetaMetaDist CovmetaMetaDist;

/**
 * A trained model loaded from a checkpoint, with the run configuration it
 * was trained under (used for adaptation defaults).
 */
typedef struct CovmetaModel CovmetaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the calling thread's most recent failure; empty until one
 * occurs. The pointer stays valid until this thread's next failing call.
 */
const char *covmeta_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *covmeta_version(void);

/**
 * Build a meta-distribution handle.
 *
 * `variant` is one of `sine`, `sine-quad-linear`, `five`; `dependence`
 * is `dependent` or `independent`; `seed` is the master data seed. On
 * success `*out` owns the handle; release it with
 * `covmeta_meta_dist_free`.
 *
 * # Safety
 * `variant` and `dependence` must be valid NUL-terminated strings and
 * `out` a valid pointer.
 */
enum CovmetaStatus covmeta_meta_dist_new(const char *variant,
                                         const char *dependence,
                                         uint64_t seed,
                                         struct CovmetaMetaDist **out);

/**
 * Release a meta-distribution handle. Null is a no-op.
 *
 * # Safety
 * `dist` must be a handle from `covmeta_meta_dist_new` (or null), not yet
 * freed.
 */
void covmeta_meta_dist_free(struct CovmetaMetaDist *dist);

/**
 * Number of covariate modes in the distribution.
 *
 * # Safety
 * `dist` must be a live handle and `out` a valid pointer.
 */
enum CovmetaStatus covmeta_meta_dist_n_modes(const struct CovmetaMetaDist *dist, size_t *out);

/**
 * Draw benchmark task `index` into caller buffers.
 *
 * `support_x`, `support_y` must hold `n_support` doubles and `query_x`,
 * `query_y` must hold `n_query` doubles. `out_mode` receives the
 * covariate mode, `out_family` the hypothesis family tag (0 sine, 1
 * quadratic, 2 linear, 3 absolute-value, 4 tanh). Task `index` under the
 * same distribution and counts is bit-reproducible.
 *
 * # Safety
 * `dist` must be a live handle and every output pointer valid for the
 * documented length.
 */
enum CovmetaStatus covmeta_sample_task(const struct CovmetaMetaDist *dist,
                                       uint64_t index,
                                       size_t n_support,
                                       size_t n_query,
                                       double *support_x,
                                       double *support_y,
                                       double *query_x,
                                       double *query_y,
                                       uint32_t *out_mode,
                                       uint8_t *out_family);

/**
 * Load a model checkpoint. On success `*out` owns the handle; release it
 * with `covmeta_model_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum CovmetaStatus covmeta_model_load(const char *path, struct CovmetaModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be a handle from `covmeta_model_load` (or null), not yet
 * freed.
 */
void covmeta_model_free(struct CovmetaModel *model);

/**
 * Total number of meta-parameters in the loaded model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum CovmetaStatus covmeta_model_param_count(const struct CovmetaModel *model, size_t *out);

/**
 * Adapt the model to a support set and predict at the query points.
 *
 * `support_x`/`support_y` hold `n_support` doubles, `query_x` holds
 * `n_query`; predictions go to `out_post` (`n_query` doubles) and, when
 * non-null, `out_pre` receives the pre-adaptation predictions too.
 * `k` is the number of adaptation steps (negative = the model's training
 * value) and `eta0` the step size (NaN = the model's training value).
 * `eps_seed` seeds the latent draw hierarchical models condition on;
 * the same seed and inputs give bit-identical predictions.
 *
 * # Safety
 * All array pointers must be valid for the documented lengths.
 */
enum CovmetaStatus covmeta_adapt_predict(const struct CovmetaModel *model,
                                         uint64_t eps_seed,
                                         const double *support_x,
                                         const double *support_y,
                                         size_t n_support,
                                         const double *query_x,
                                         size_t n_query,
                                         int32_t k,
                                         double eta0,
                                         double *out_pre,
                                         double *out_post);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* COVMETA_H */
