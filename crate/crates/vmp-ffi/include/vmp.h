#ifndef VMP_H
#define VMP_H

/* Generated by cbindgen from crates/vmp-ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `VMP_STATUS_OK` is zero.
 */
typedef enum VmpStatus {
  VMP_STATUS_OK = 0,
  VMP_STATUS_NULL_ARGUMENT = 1,
  VMP_STATUS_INVALID_ARGUMENT = 2,
  VMP_STATUS_DIMENSION = 3,
  VMP_STATUS_NUMERIC = 4,
  VMP_STATUS_CONTRACT = 5,
  VMP_STATUS_CONFIG = 6,
  VMP_STATUS_FORMAT = 7,
  VMP_STATUS_MISMATCH = 8,
  VMP_STATUS_IO = 9,
  VMP_STATUS_PANIC = 10,
} VmpStatus;

/**
 * A loaded source model.
 */
typedef struct VmpModel VmpModel;

/**
 * A loaded perturbation, bound to the model it was loaded against.
 */
typedef struct VmpPerturbation VmpPerturbation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static description of a status code.
 */
const char *vmp_status_str(enum VmpStatus status);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t vmp_last_error(char *buf, size_t len);

/**
 * Loads a model container written by `vmp train-source`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VmpStatus vmp_model_load(const char *path, struct VmpModel **out);

/**
 * # Safety
 * `model` must come from `vmp_model_load` and not be freed twice.
 */
void vmp_model_free(struct VmpModel *model);

/**
 * Values per input row (product of the per-sample input shape).
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t vmp_model_input_len(const struct VmpModel *model);

/**
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t vmp_model_num_classes(const struct VmpModel *model);

/**
 * Class probabilities of the unperturbed model (eval-mode BN).
 *
 * `inputs` holds `rows * vmp_model_input_len` values, row-major; `out`
 * receives `rows * vmp_model_num_classes` values.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum VmpStatus vmp_model_predict(const struct VmpModel *model,
                                 const double *inputs,
                                 size_t rows,
                                 double *out,
                                 size_t out_len);

/**
 * Loads a perturbation container and checks it against `model`.
 *
 * # Safety
 * `model` must be live, `path` NUL-terminated, `out` writable.
 */
enum VmpStatus vmp_perturbation_load(const struct VmpModel *model,
                                     const char *path,
                                     struct VmpPerturbation **out);

/**
 * # Safety
 * `pert` must come from `vmp_perturbation_load` and not be freed twice.
 */
void vmp_perturbation_free(struct VmpPerturbation *pert);

/**
 * Monte Carlo class probabilities averaged over `samples` weight draws.
 * Deterministic for a given `seed`.
 *
 * # Safety
 * Handles must be live and pointers valid for the stated lengths.
 */
enum VmpStatus vmp_perturbation_predict(const struct VmpModel *model,
                                        const struct VmpPerturbation *pert,
                                        const double *inputs,
                                        size_t rows,
                                        size_t samples,
                                        uint64_t seed,
                                        double *out,
                                        size_t out_len);

/**
 * Sum over all perturbed weights of their standard deviation.
 *
 * # Safety
 * `pert` must be live and `out` writable.
 */
enum VmpStatus vmp_perturbation_sigma_l1(const struct VmpPerturbation *pert, double *out);

/**
 * Number of perturbed layers (rows written by `vmp_perturbation_sigma_l1_per_layer`).
 *
 * # Safety
 * `pert` must be a live handle or null (returns 0).
 */
size_t vmp_perturbation_layer_count(const struct VmpPerturbation *pert);

/**
 * Writes `(layer_id, l1_sigma)` pairs for up to `capacity` layers.
 *
 * # Safety
 * `layer_ids` and `values` must hold `capacity` elements.
 */
enum VmpStatus vmp_perturbation_sigma_l1_per_layer(const struct VmpPerturbation *pert,
                                                   size_t *layer_ids,
                                                   double *values,
                                                   size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VMP_H */
