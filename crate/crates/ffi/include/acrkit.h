#ifndef ACRKIT_H
#define ACRKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status returned by every fallible call.
 */
typedef enum AcrCode {
  ACR_CODE_OK = 0,
  ACR_CODE_NULL_POINTER = 1,
  ACR_CODE_INVALID_INPUT = 2,
  ACR_CODE_INSUFFICIENT_DATA = 3,
  ACR_CODE_DEGENERATE_MODEL = 4,
  ACR_CODE_CHEIRALITY_FAILURE = 5,
  ACR_CODE_AMBIGUOUS_NULLSPACE = 6,
  ACR_CODE_ESTIMATION_FAILURE = 7,
  ACR_CODE_CONFIG = 8,
  ACR_CODE_BUFFER_TOO_SMALL = 9,
  ACR_CODE_PANIC = 10,
} AcrCode;

/**
 * Opaque set of pixel correspondences between two images.
 */
typedef struct AcrCorrespondences AcrCorrespondences;

/**
 * Opaque plane label image; label 0 marks pixels outside every plane.
 */
typedef struct AcrPlaneMask AcrPlaneMask;

/**
 * Pinhole intrinsics in pixels.
 */
typedef struct AcrIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
} AcrIntrinsics;

/**
 * Relative pose `x_cur = R x_ref + t` with `t` known up to scale.
 *
 * `rotation` is row-major. `direction` is a unit vector when
 * `has_direction` is set and zero otherwise.
 */
typedef struct AcrRelativePose {
  double rotation[9];
  double direction[3];
  bool has_direction;
} AcrRelativePose;

/**
 * Outcome of one simulated relocalization. Errors are NaN when unknown.
 */
typedef struct AcrRunSummary {
  bool converged;
  size_t iterations;
  size_t motions;
  double final_rot_err_deg;
  double final_trans_err_m;
} AcrRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *acr_version(void);

/**
 * Copy of the last error message on this thread, or null when none.
 * Release it with [`acr_string_free`].
 */
char *acr_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void acr_string_free(char *s);

/**
 * Builds a correspondence set from `n` pixel pairs given as interleaved
 * `(u, v)` coordinates in `a_uv` and `b_uv` (each `2n` doubles).
 *
 * # Safety
 * `a_uv` and `b_uv` must point to `2n` readable doubles and `out` must be
 * writable.
 */
enum AcrCode acr_correspondences_new(const double *a_uv,
                                     const double *b_uv,
                                     size_t n,
                                     struct AcrCorrespondences **out);

/**
 * Number of pairs in `c`, or 0 for null.
 *
 * # Safety
 * `c` must be null or a live handle.
 */
size_t acr_correspondences_len(const struct AcrCorrespondences *c);

/**
 * # Safety
 * `c` must be null or a live handle; it is invalid afterwards.
 */
void acr_correspondences_free(struct AcrCorrespondences *c);

/**
 * Builds a plane mask from `width * height` row-major labels.
 *
 * # Safety
 * `labels` must point to `width * height` readable values and `out` must be
 * writable.
 */
enum AcrCode acr_plane_mask_new(uint32_t width,
                                uint32_t height,
                                const uint16_t *labels,
                                struct AcrPlaneMask **out);

/**
 * Number of planes in `m`, or 0 for null.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t acr_plane_mask_num_planes(const struct AcrPlaneMask *m);

/**
 * # Safety
 * `m` must be null or a live handle; it is invalid afterwards.
 */
void acr_plane_mask_free(struct AcrPlaneMask *m);

/**
 * Plane-mediated relative pose from correspondences and the plane masks of
 * both images, with default settings.
 *
 * # Safety
 * All pointers must be live handles or valid, writable structs.
 */
enum AcrCode acr_estimate_pose(const struct AcrCorrespondences *c,
                               const struct AcrPlaneMask *mask_ref,
                               const struct AcrPlaneMask *mask_cur,
                               const struct AcrIntrinsics *intr,
                               struct AcrRelativePose *out);

/**
 * Relative pose from the essential matrix of all correspondences.
 *
 * # Safety
 * All pointers must be live handles or valid, writable structs.
 */
enum AcrCode acr_estimate_epipolar(const struct AcrCorrespondences *c,
                                   const struct AcrIntrinsics *intr,
                                   uint32_t width,
                                   uint32_t height,
                                   struct AcrRelativePose *out);

/**
 * Solves the depth and scale system for the pairs of `c` under `pose`.
 *
 * Writes the unit-norm solution: per-pair depths in both views into
 * `depth_a` and `depth_b` (each of length `n`, which must equal the number
 * of pairs) and the translation scale into `scale`. Only ratios are
 * meaningful.
 *
 * # Safety
 * All pointers must be live handles or valid, writable buffers.
 */
enum AcrCode acr_solve_scale(const struct AcrCorrespondences *c,
                             const struct AcrIntrinsics *intr,
                             const struct AcrRelativePose *pose,
                             double *depth_a,
                             double *depth_b,
                             size_t n,
                             double *scale);

/**
 * Runs one simulated relocalization described by a JSON configuration
 * (null or empty for the defaults). With `baseline` set the bisection
 * baseline runs instead of the plane-mediated loop. When `trace_json` is
 * not null it receives the step records as a JSON array, to be released
 * with [`acr_string_free`].
 *
 * # Safety
 * `config_json` must be null or NUL-terminated; `out` must be writable.
 */
enum AcrCode acr_simulate(const char *config_json,
                          bool baseline,
                          struct AcrRunSummary *out,
                          char **trace_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACRKIT_H */
