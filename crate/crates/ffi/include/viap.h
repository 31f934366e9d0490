#ifndef VIAP_H
#define VIAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ViapStatus {
  VIAP_STATUS_OK = 0,
  VIAP_STATUS_NULL_POINTER = 1,
  VIAP_STATUS_INVALID_ARGUMENT = 2,
  VIAP_STATUS_SHAPE = 3,
  VIAP_STATUS_LABEL_OUT_OF_RANGE = 4,
  VIAP_STATUS_NON_FINITE = 5,
  VIAP_STATUS_IO = 6,
  VIAP_STATUS_FORMAT = 7,
  VIAP_STATUS_BUFFER_SIZE = 8,
  VIAP_STATUS_PANIC = 9,
  VIAP_STATUS_OTHER = 10,
} ViapStatus;

typedef enum ViapFamily {
  VIAP_FAMILY_FGSM = 0,
  VIAP_FAMILY_FGSM_TARGETED = 1,
  VIAP_FAMILY_BIM = 2,
  VIAP_FAMILY_BIM_TARGETED = 3,
  VIAP_FAMILY_VIAP = 4,
  VIAP_FAMILY_VIAP_TARGETED = 5,
} ViapFamily;

/**
 * Opaque trained classifier.
 */
typedef struct ViapModel ViapModel;

/**
 * Opaque universal perturbation.
 */
typedef struct ViapPerturbation ViapPerturbation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failed call on this thread, or NULL. The
 * pointer stays valid until the next call into this library on the thread.
 */
const char *viap_last_error(void);

/**
 * Static name of a status code; unknown codes map to `"unknown"`.
 */
const char *viap_status_name(int32_t status);

/**
 * Loads a params file written by `viap train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ViapStatus viap_model_load(const char *path, struct ViapModel **out);

/**
 * # Safety
 * `model` must come from `viap_model_load` and not be used afterwards.
 */
void viap_model_free(struct ViapModel *model);

/**
 * Input extents and class count of a model. Any output pointer may be NULL.
 *
 * # Safety
 * Non-NULL pointers must be valid for writes.
 */
enum ViapStatus viap_model_info(const struct ViapModel *model,
                                size_t *height,
                                size_t *width,
                                size_t *channels,
                                size_t *classes);

/**
 * Softmax probabilities for `count` images into `probs` (`count * classes`).
 *
 * # Safety
 * `images` must hold `count * H * W * C` doubles and `probs` `probs_len`.
 */
enum ViapStatus viap_predict(const struct ViapModel *model,
                             const double *images,
                             size_t count,
                             double *probs,
                             size_t probs_len);

/**
 * Gradient of the cross-entropy loss for `label` w.r.t. one image.
 * `loss` may be NULL.
 *
 * # Safety
 * `image` and `grad` must hold `image_len` doubles.
 */
enum ViapStatus viap_input_gradient(const struct ViapModel *model,
                                    const double *image,
                                    size_t image_len,
                                    size_t label,
                                    double *grad,
                                    size_t grad_len,
                                    double *loss);

/**
 * Per-image attack (FGSM, FGSM-T, BIM, BIM-T; `family` is a `ViapFamily`).
 * `epsilon` is on the 0-255 scale; `iterations == 0` selects the default of
 * 20 for BIM families; `target < 0` means none.
 *
 * # Safety
 * `image` and `out` must hold `image_len` doubles.
 */
enum ViapStatus viap_attack_image(const struct ViapModel *model,
                                  const double *image,
                                  size_t image_len,
                                  size_t label,
                                  int32_t family,
                                  double epsilon,
                                  size_t iterations,
                                  int64_t target,
                                  double *out,
                                  size_t out_len);

/**
 * Crafts one perturbation shared by `count` images (`family` is
 * `VIAP_FAMILY_VIAP` or `VIAP_FAMILY_VIAP_TARGETED`). Arguments as in
 * `viap_attack_image`; `seed` drives the initial noise.
 *
 * # Safety
 * `images` must hold `count * image_len` doubles, `labels` `count` entries,
 * and `out` must be valid for writes.
 */
enum ViapStatus viap_craft(const struct ViapModel *model,
                           const double *images,
                           size_t count,
                           size_t image_len,
                           const size_t *labels,
                           int32_t family,
                           double epsilon,
                           size_t iterations,
                           int64_t target,
                           uint64_t seed,
                           struct ViapPerturbation **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ViapStatus viap_perturbation_load(const char *path, struct ViapPerturbation **out);

/**
 * # Safety
 * `p` must be a live handle and `path` a NUL-terminated string.
 */
enum ViapStatus viap_perturbation_save(const struct ViapPerturbation *p, const char *path);

/**
 * # Safety
 * `p` must come from this library and not be used afterwards.
 */
void viap_perturbation_free(struct ViapPerturbation *p);

/**
 * Number of doubles in the perturbation (equal to one image).
 *
 * # Safety
 * `p` must be a live handle and `len` valid for writes.
 */
enum ViapStatus viap_perturbation_len(const struct ViapPerturbation *p, size_t *len);

/**
 * Copies `delta` into `out`.
 *
 * # Safety
 * `out` must hold `out_len` doubles.
 */
enum ViapStatus viap_perturbation_delta(const struct ViapPerturbation *p,
                                        double *out,
                                        size_t out_len);

/**
 * `out = clamp(image + delta, 0, 1)`.
 *
 * # Safety
 * `image` and `out` must hold `image_len` doubles.
 */
enum ViapStatus viap_perturbation_apply(const struct ViapPerturbation *p,
                                        const double *image,
                                        size_t image_len,
                                        double *out,
                                        size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIAP_H */
