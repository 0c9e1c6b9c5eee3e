#ifndef STEINPRUNE_H
#define STEINPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_ARGUMENT = 1,
  // Shapes, ranges, configs and other caller mistakes.
  SP_STATUS_INVALID_ARGUMENT = 2,
  SP_STATUS_NUMERIC = 3,
  // Malformed checkpoint or data file.
  SP_STATUS_FORMAT = 4,
  SP_STATUS_IO = 5,
  // A Rust panic was caught; the handle arguments may be inconsistent.
  SP_STATUS_PANIC = 6,
} SpStatus;

typedef enum SpTrainStatus {
  SP_TRAIN_STATUS_COMPLETED = 0,
  SP_TRAIN_STATUS_CONVERGED = 1,
  SP_TRAIN_STATUS_DIVERGED = 2,
  SP_TRAIN_STATUS_PAUSED = 3,
} SpTrainStatus;

typedef enum SpNoiseCase {
  SP_NOISE_CASE_CLEAN = 0,
  SP_NOISE_CASE_MODEL_NOISE = 1,
  SP_NOISE_CASE_DATA_NOISE = 2,
  SP_NOISE_CASE_BOTH = 3,
} SpNoiseCase;

// Labelled inputs.
typedef struct SpDataset SpDataset;

// Particle ensemble with its training config.
typedef struct SpEnsemble SpEnsemble;

// Keep/drop flag per parameter.
typedef struct SpMask SpMask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *sp_version(void);

// Message of the last failure on this thread, or null. Valid until the
// next failing call on the same thread.
const char *sp_last_error_message(void);

// Gaussian class clusters at distance `separation` (in cluster stds).
//
// # Safety
// `out_dataset` must be a valid pointer to writable storage for a handle.
enum SpStatus sp_dataset_blobs(size_t classes,
                               size_t per_class,
                               size_t dim,
                               double separation,
                               uint64_t seed,
                               struct SpDataset **out_dataset);

// Copies a row-major `rows x cols` input matrix and one label per row.
//
// # Safety
// `inputs` must point to `rows * cols` values, `labels` to `rows` values,
// and `out_dataset` to writable storage for a handle.
enum SpStatus sp_dataset_from_arrays(const double *inputs,
                                     size_t rows,
                                     size_t cols,
                                     const uint32_t *labels,
                                     size_t num_classes,
                                     struct SpDataset **out_dataset);

// # Safety
// `dataset` must be a live handle and `out_len` writable.
enum SpStatus sp_dataset_len(const struct SpDataset *dataset, size_t *out_len);

// # Safety
// `dataset` must be null or a handle not yet freed.
void sp_dataset_free(struct SpDataset *dataset);

// New ensemble of a ReLU MLP with layer widths `sizes[0..n_sizes]` (input
// first, classes last). `config_json` is a training config as JSON, or
// null for defaults; it seeds the initialization and is kept for training.
//
// # Safety
// `sizes` must point to `n_sizes` values; `config_json` must be null or a
// nul-terminated string; `out_ensemble` must be writable.
enum SpStatus sp_ensemble_new(const size_t *sizes,
                              size_t n_sizes,
                              size_t particles,
                              const char *config_json,
                              struct SpEnsemble **out_ensemble);

// Trains in place with the ensemble's config. On divergence the last good
// state is kept and the status reports it.
//
// # Safety
// `ensemble` and `dataset` must be live handles; `out_status` writable.
enum SpStatus sp_ensemble_train(struct SpEnsemble *ensemble,
                                const struct SpDataset *dataset,
                                enum SpTrainStatus *out_status);

// # Safety
// `ensemble` must be a live handle; out-pointers writable.
enum SpStatus sp_ensemble_shape(const struct SpEnsemble *ensemble,
                                size_t *out_particles,
                                size_t *out_params);

// Accuracy of one particle with hardened gates.
//
// # Safety
// `ensemble` and `dataset` must be live handles; `out_accuracy` writable.
enum SpStatus sp_ensemble_accuracy(const struct SpEnsemble *ensemble,
                                   const struct SpDataset *dataset,
                                   size_t particle,
                                   double *out_accuracy);

// Mean over coordinates of the inter-particle variance of the weights.
//
// # Safety
// `ensemble` must be a live handle; `out_dispersion` writable.
enum SpStatus sp_ensemble_dispersion(const struct SpEnsemble *ensemble, double *out_dispersion);

// Writes a checkpoint with the ensemble and its config.
//
// # Safety
// `ensemble` must be a live handle; `path` a nul-terminated string.
enum SpStatus sp_ensemble_save(const struct SpEnsemble *ensemble, const char *path);

// Reads a checkpoint. Its stored training config is used when it parses;
// otherwise the defaults.
//
// # Safety
// `path` must be a nul-terminated string; `out_ensemble` writable.
enum SpStatus sp_ensemble_load(const char *path, struct SpEnsemble **out_ensemble);

// # Safety
// `ensemble` must be null or a handle not yet freed.
void sp_ensemble_free(struct SpEnsemble *ensemble);

// Slab of particle 0: parameters whose inclusion probability reaches
// `gate_threshold`.
//
// # Safety
// `ensemble` must be a live handle; `out_mask` writable.
enum SpStatus sp_prune_slab(const struct SpEnsemble *ensemble,
                            double gate_threshold,
                            struct SpMask **out_mask);

// Drops the `round(sparsity * M)` smallest-magnitude parameters of
// particle 0.
//
// # Safety
// `ensemble` must be a live handle; `out_mask` writable.
enum SpStatus sp_prune_magnitude(const struct SpEnsemble *ensemble,
                                 double sparsity,
                                 struct SpMask **out_mask);

// # Safety
// `mask` must be a live handle; out-pointers writable.
enum SpStatus sp_mask_stats(const struct SpMask *mask, size_t *out_len, double *out_sparsity);

// Copies the keep flags (1 kept, 0 dropped); `len` must equal the mask
// length.
//
// # Safety
// `mask` must be a live handle; `out_keep` must hold `len` bytes.
enum SpStatus sp_mask_copy_keep(const struct SpMask *mask, uint8_t *out_keep, size_t len);

// # Safety
// `mask` must be null or a handle not yet freed.
void sp_mask_free(struct SpMask *mask);

// Estimation efficiency `crlb / variance` for one noise case.
//
// # Safety
// `out_efficiency` must be writable.
enum SpStatus sp_efficiency(enum SpNoiseCase noise_case,
                            double eps2,
                            double alpha2,
                            double beta2_noise,
                            double *out_efficiency);

// `exp(-|a - b|^2 / h)` for two vectors of length `len`.
//
// # Safety
// `a` and `b` must point to `len` values; `out_value` writable.
enum SpStatus sp_rbf_kernel(const double *a,
                            const double *b,
                            size_t len,
                            double bandwidth,
                            double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEINPRUNE_H */
