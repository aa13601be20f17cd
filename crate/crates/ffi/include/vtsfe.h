#ifndef VTSFE_H
#define VTSFE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum VtsfeStatus {
  VTSFE_STATUS_OK = 0,
  // A required pointer argument was null.
  VTSFE_STATUS_NULL_ARGUMENT = 1,
  // Invalid configuration or arguments.
  VTSFE_STATUS_CONFIG = 2,
  // Malformed input data or checkpoint.
  VTSFE_STATUS_DATA = 3,
  // Computation failed, e.g. a non-finite loss.
  VTSFE_STATUS_RUNTIME = 4,
  // File system error.
  VTSFE_STATUS_IO = 5,
  // The library panicked; the handle arguments should not be reused.
  VTSFE_STATUS_PANIC = 6,
} VtsfeStatus;

// Opaque dataset handle.
typedef struct VtsfeDataset VtsfeDataset;

// Opaque trained model handle.
typedef struct VtsfeModel VtsfeModel;

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *vtsfe_last_error(void);

// Generates the synthetic motion set.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum VtsfeStatus vtsfe_dataset_synth(uintptr_t classes,
                                     uintptr_t demos,
                                     uintptr_t frames,
                                     uintptr_t dims,
                                     uint64_t seed,
                                     struct VtsfeDataset **out);

// Loads a dataset from a JSON manifest.
//
// # Safety
// `manifest` must be a NUL-terminated string and `out` writable.
enum VtsfeStatus vtsfe_dataset_load(const char *manifest, struct VtsfeDataset **out);

// Number of demonstrations, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
uintptr_t vtsfe_dataset_len(const struct VtsfeDataset *ds);

// Frame count and dimension of demonstration `index`.
//
// # Safety
// `ds` must be a live handle; `frames` and `dims` writable.
enum VtsfeStatus vtsfe_dataset_demo_shape(const struct VtsfeDataset *ds,
                                          uintptr_t index,
                                          uintptr_t *frames,
                                          uintptr_t *dims);

// Copies demonstration `index` into `buf` in row-major order.
// `len` must equal frames × dims.
//
// # Safety
// `ds` must be a live handle and `buf` valid for `len` writes.
enum VtsfeStatus vtsfe_dataset_demo_copy(const struct VtsfeDataset *ds,
                                         uintptr_t index,
                                         double *buf,
                                         uintptr_t len);

// Releases a dataset. Null is ignored.
//
// # Safety
// `ds` must be null or a handle not yet freed.
void vtsfe_dataset_free(struct VtsfeDataset *ds);

// Trains a model on `ds`. `config_json` uses the keys of the CLI's
// configuration file and may be null for defaults. The data are resampled
// and normalized as by the `train` command.
//
// # Safety
// `ds` must be a live handle, `config_json` null or NUL-terminated, and
// `out` writable.
enum VtsfeStatus vtsfe_train(const struct VtsfeDataset *ds,
                             const char *config_json,
                             struct VtsfeModel **out);

// Loads a checkpoint written by the CLI or [`vtsfe_model_save`].
//
// # Safety
// `path` must be NUL-terminated and `out` writable.
enum VtsfeStatus vtsfe_model_load(const char *path, struct VtsfeModel **out);

// # Safety
// `model` must be a live handle and `path` NUL-terminated.
enum VtsfeStatus vtsfe_model_save(const struct VtsfeModel *model, const char *path);

// Input dimension, latent dimension and sequence length of a model.
//
// # Safety
// `model` must be a live handle; non-null outputs must be writable.
enum VtsfeStatus vtsfe_model_shape(const struct VtsfeModel *model,
                                   uintptr_t *input_dim,
                                   uintptr_t *latent_dim,
                                   uintptr_t *seq_len);

// Reconstructs one normalized sequence of `frames` × input_dim values
// (row-major, `frames` equal to the model's sequence length). Writes the
// decoded means to `recon` (same size) and, if non-null, the latent
// trajectory to `latent` (`frames` × latent_dim).
//
// # Safety
// `model` must be a live handle; `input` and `recon` valid for
// frames × input_dim values; `latent` null or valid for frames ×
// latent_dim values.
enum VtsfeStatus vtsfe_model_reconstruct(const struct VtsfeModel *model,
                                         const double *input,
                                         uintptr_t frames,
                                         double *recon,
                                         double *latent);

// Reconstruction MSE (reported scale, ×10³) and Σvar of the model on a
// raw dataset, which is resampled and scaled with the model's scaler.
//
// # Safety
// `model` and `ds` must be live handles; `mse` and `sum_var` writable.
enum VtsfeStatus vtsfe_model_evaluate(const struct VtsfeModel *model,
                                      const struct VtsfeDataset *ds,
                                      double *mse,
                                      double *sum_var);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void vtsfe_model_free(struct VtsfeModel *model);

#endif  /* VTSFE_H */
