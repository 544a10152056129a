#ifndef CLIPN_H
#define CLIPN_H

/* Generated by cbindgen from clipn-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every FFI entry point.
 */
typedef enum ClipnStatus {
  /**
   * Success.
   */
  CLIPN_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CLIPN_STATUS_NULL_POINTER = 1,
  /**
   * Dimensions or lengths are inconsistent.
   */
  CLIPN_STATUS_DIM_MISMATCH = 2,
  /**
   * A numeric argument is out of range.
   */
  CLIPN_STATUS_INVALID_ARGUMENT = 3,
  /**
   * The operation failed internally.
   */
  CLIPN_STATUS_INTERNAL = 4,
} ClipnStatus;

/**
 * Scoring method selector for [`clipn_score`].
 */
typedef enum ClipnMethod {
  CLIPN_METHOD_MSP = 0,
  CLIPN_METHOD_MAX_LOGIT = 1,
  CLIPN_METHOD_ENERGY = 2,
  CLIPN_METHOD_REACT = 3,
  CLIPN_METHOD_ODIN = 4,
  CLIPN_METHOD_CTW = 5,
  CLIPN_METHOD_ATD = 6,
} ClipnMethod;

/**
 * Opaque class text bank handle.
 */
typedef struct ClipnBank ClipnBank;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a bank from row-major standard and negation feature tables of
 * shape `classes x dim` (rows must be unit norm) and a positive
 * temperature. Class names are optional; pass null to use generated
 * names. On success writes a handle that must be freed with
 * [`clipn_bank_free`].
 *
 * # Safety
 * `standard` and `negation` must point to `classes * dim` doubles;
 * `names`, when non-null, must point to `classes` valid C strings;
 * `out_bank` must be a valid pointer.
 */
enum ClipnStatus clipn_bank_new(uintptr_t classes,
                                uintptr_t dim,
                                const double *standard,
                                const double *negation,
                                double tau,
                                const char *const *names,
                                struct ClipnBank **out_bank);

/**
 * Frees a bank created by [`clipn_bank_new`]. Null is a no-op.
 *
 * # Safety
 * `bank` must be null or a pointer previously returned by
 * [`clipn_bank_new`] that has not been freed.
 */
void clipn_bank_free(struct ClipnBank *bank);

/**
 * Number of classes in the bank.
 *
 * # Safety
 * `bank` must be a live handle from [`clipn_bank_new`].
 */
uintptr_t clipn_bank_classes(const struct ClipnBank *bank);

/**
 * Scores one unit-norm feature vector of length `dim` with the given
 * method. Writes the idness score to `out_idness`. `out_is_id` receives
 * 1/0 for the threshold-free methods (CTW, ATD) and -1 otherwise; pass
 * null to skip it. Baseline hyperparameters use the library defaults
 * (energy T = 1, ODIN T = 1000 and eps = 0.0014, ReAct clamp infinite).
 *
 * # Safety
 * `bank` must be a live handle; `feature` must point to `dim` doubles;
 * `out_idness` must be valid.
 */
enum ClipnStatus clipn_score(const struct ClipnBank *bank,
                             const double *feature,
                             uintptr_t dim,
                             enum ClipnMethod method,
                             double *out_idness,
                             int *out_is_id);

/**
 * AUROC of ID scores against OOD scores (ties count one half).
 *
 * # Safety
 * `id_scores` / `ood_scores` must point to `id_len` / `ood_len` doubles;
 * `out` must be valid.
 */
enum ClipnStatus clipn_auroc(const double *id_scores,
                             uintptr_t id_len,
                             const double *ood_scores,
                             uintptr_t ood_len,
                             double *out);

/**
 * False positive rate at the given true-positive-rate target.
 *
 * # Safety
 * Same pointer requirements as [`clipn_auroc`].
 */
enum ClipnStatus clipn_fpr_at_tpr(const double *id_scores,
                                  uintptr_t id_len,
                                  const double *ood_scores,
                                  uintptr_t ood_len,
                                  double tpr_target,
                                  double *out);

/**
 * Normalizes `v` (length `len`) to unit L2 norm in place. Fails on
 * near-zero vectors.
 *
 * # Safety
 * `v` must point to `len` writable doubles.
 */
enum ClipnStatus clipn_l2_normalize(double *v, uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLIPN_H */
