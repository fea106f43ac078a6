#ifndef DDE_H
#define DDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum DdeStatus {
  DDE_STATUS_OK = 0,
  DDE_STATUS_NULL_POINTER = 1,
  DDE_STATUS_INVALID_ARGUMENT = 2,
  DDE_STATUS_CONFIG = 3,
  DDE_STATUS_IO = 4,
  DDE_STATUS_NUMERIC = 5,
  DDE_STATUS_WRONG_KIND = 6,
  DDE_STATUS_PANIC = 7,
} DdeStatus;

/**
 * A trained generator.
 */
typedef struct DdeGeneratorHandle DdeGeneratorHandle;

/**
 * A trained energy network.
 */
typedef struct DdeModelHandle DdeModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or an empty string. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dde_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dde_version(void);

/**
 * Load an energy checkpoint. On success `*out` owns a handle to free with [`dde_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DdeStatus dde_model_load(const char *path, struct DdeModelHandle **out);

/**
 * # Safety
 * `handle` must come from [`dde_model_load`] and not be used afterwards. NULL is ignored.
 */
void dde_model_free(struct DdeModelHandle *handle);

/**
 * Input dimension, or 0 for a NULL handle.
 *
 * # Safety
 * `handle` must be NULL or a live handle.
 */
size_t dde_model_dim(const struct DdeModelHandle *handle);

/**
 * Noise level the model was trained at, or NaN for a NULL handle.
 *
 * # Safety
 * `handle` must be NULL or a live handle.
 */
double dde_model_sigma_eta(const struct DdeModelHandle *handle);

/**
 * Unnormalised log-density `s(x)` for `n` row-major points; writes `n` values.
 *
 * # Safety
 * `x` must hold `n·dim` doubles and `out` room for `n`.
 */
enum DdeStatus dde_model_log_density(const struct DdeModelHandle *handle,
                                     const double *x,
                                     size_t n,
                                     double *out);

/**
 * Score `∇s(x)`; writes `n·dim` values.
 *
 * # Safety
 * `x` must hold `n·dim` doubles and `out` room for as many.
 */
enum DdeStatus dde_model_score(const struct DdeModelHandle *handle,
                               const double *x,
                               size_t n,
                               double *out);

/**
 * Denoised points `x + σ²∇s(x)`; writes `n·dim` values.
 *
 * # Safety
 * `x` must hold `n·dim` doubles and `out` room for as many.
 */
enum DdeStatus dde_model_denoise(const struct DdeModelHandle *handle,
                                 const double *x,
                                 size_t n,
                                 double *out);

/**
 * Load a generator checkpoint. Free the handle with [`dde_generator_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DdeStatus dde_generator_load(const char *path, struct DdeGeneratorHandle **out);

/**
 * # Safety
 * `handle` must come from [`dde_generator_load`] and not be used afterwards. NULL is ignored.
 */
void dde_generator_free(struct DdeGeneratorHandle *handle);

/**
 * Output dimension, or 0 for a NULL handle.
 *
 * # Safety
 * `handle` must be NULL or a live handle.
 */
size_t dde_generator_dim(const struct DdeGeneratorHandle *handle);

/**
 * Latent dimension, or 0 for a NULL handle.
 *
 * # Safety
 * `handle` must be NULL or a live handle.
 */
size_t dde_generator_latent_dim(const struct DdeGeneratorHandle *handle);

/**
 * `n` samples drawn as `samplers::sample_direct(generator, n, seed)`; writes `n·dim` values.
 *
 * # Safety
 * `out` must have room for `n·dim` doubles.
 */
enum DdeStatus dde_generator_sample(const struct DdeGeneratorHandle *handle,
                                    size_t n,
                                    uint64_t seed,
                                    double *out);

/**
 * `g(z)` for `n` row-major latent vectors; writes `n·dim` values.
 *
 * # Safety
 * `z` must hold `n·latent_dim` doubles and `out` room for `n·dim`.
 */
enum DdeStatus dde_generator_forward(const struct DdeGeneratorHandle *handle,
                                     const double *z,
                                     size_t n,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDE_H */
