#ifndef FMX_H
#define FMX_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum FmxStatus {
  FMX_STATUS_OK = 0,
  FMX_STATUS_NULL_POINTER = 1,
  FMX_STATUS_INVALID_ARGUMENT = 2,
  FMX_STATUS_BUFFER_SIZE = 3,
  FMX_STATUS_IO = 4,
  FMX_STATUS_PARSE = 5,
  FMX_STATUS_CONFIG = 6,
  FMX_STATUS_SHAPE = 7,
  FMX_STATUS_INDEX = 8,
  FMX_STATUS_DOMAIN = 9,
  FMX_STATUS_NUMERIC = 10,
  FMX_STATUS_PANIC = 11,
} FmxStatus;

/**
 * A trained model and prior loaded from a checkpoint.
 */
typedef struct FmxModel FmxModel;

typedef struct FmxShape {
  size_t data_dim;
  size_t latent_dim;
  size_t blocks;
  size_t block_dim;
  /**
   * Sum of the component counts over blocks.
   */
  size_t total_components;
} FmxShape;

/**
 * Predictive bound of one datum and its terms.
 */
typedef struct FmxBound {
  double recon;
  double kl_z;
  double kl_r;
  double bound;
} FmxBound;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the next call.
 */
const char *fmx_last_error(void);

/**
 * Version string of this library; static storage.
 */
const char *fmx_version(void);

/**
 * Loads a checkpoint written by `fmx train`. On success `*out` owns a handle to release
 * with [`fmx_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum FmxStatus fmx_model_load(const char *path, struct FmxModel **out);

/**
 * Releases a handle from [`fmx_model_load`]. Null is ignored.
 *
 * # Safety
 * `h` must come from [`fmx_model_load`] and not have been freed.
 */
void fmx_model_free(struct FmxModel *h);

/**
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
enum FmxStatus fmx_model_shape(const struct FmxModel *h, struct FmxShape *out);

/**
 * Writes the component count of each block into `ks[0..blocks]`.
 *
 * # Safety
 * `h` must be a live handle and `ks` must point to `len` writable values.
 */
enum FmxStatus fmx_model_components(const struct FmxModel *h, size_t *ks, size_t len);

/**
 * Encoder mean and log-variance of one datum.
 *
 * # Safety
 * `x` must point to `x_len` values; `mu` and `log_var` to `latent_len` writable values each.
 */
enum FmxStatus fmx_encode(const struct FmxModel *h,
                          const double *x,
                          size_t x_len,
                          double *mu,
                          double *log_var,
                          size_t latent_len);

/**
 * Optimal responsibilities of one datum, block after block (`out_len` = total components).
 *
 * # Safety
 * `x` must point to `x_len` values and `out` to `out_len` writable values.
 */
enum FmxStatus fmx_responsibilities(const struct FmxModel *h,
                                    const double *x,
                                    size_t x_len,
                                    double *out,
                                    size_t out_len);

/**
 * Draws `count` codes from the prior and decodes them.
 *
 * `clamp` holds one entry per block: a 0-based component index, or a negative value to
 * sample that block freely. It may be null when `clamp_len` is 0. Codes are written
 * 0-based, `count × blocks`; decoded means `count × data_dim`.
 *
 * # Safety
 * Every pointer must cover its stated length.
 */
enum FmxStatus fmx_sample(const struct FmxModel *h,
                          const int64_t *clamp,
                          size_t clamp_len,
                          size_t count,
                          uint64_t seed,
                          uint32_t *codes,
                          size_t codes_len,
                          double *images,
                          size_t images_len);

/**
 * Predictive bound of one datum, averaged over `n_samples` reparameterized draws.
 *
 * # Safety
 * `x` must point to `x_len` values and `out` must be valid.
 */
enum FmxStatus fmx_test_elbo(const struct FmxModel *h,
                             const double *x,
                             size_t x_len,
                             size_t n_samples,
                             uint64_t seed,
                             struct FmxBound *out);

/**
 * Runs a full training job from a JSON config into `out_dir`, which receives
 * `metrics.csv` and `checkpoint.fmxc`. A negative `seed` keeps the config's seed.
 *
 * # Safety
 * Both paths must be nul-terminated strings.
 */
enum FmxStatus fmx_train(const char *config, const char *out_dir, int64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FMX_H */
