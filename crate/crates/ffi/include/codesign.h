#ifndef CODESIGN_H
#define CODESIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CodesignStatus {
  CODESIGN_STATUS_OK = 0,
  CODESIGN_STATUS_NULL_POINTER = 1,
  CODESIGN_STATUS_INVALID_ARGUMENT = 2,
  CODESIGN_STATUS_INVALID_MODEL = 3,
  /**
   * The motion solve finished without a verified feasible trajectory.
   */
  CODESIGN_STATUS_NOT_CONVERGED = 4,
  CODESIGN_STATUS_BUFFER_TOO_SMALL = 5,
  CODESIGN_STATUS_INTERNAL = 6,
} CodesignStatus;

typedef enum CodesignSpace {
  CODESIGN_SPACE_JOINT = 0,
  CODESIGN_SPACE_ACTUATION = 1,
} CodesignSpace;

typedef enum CodesignSolveStatus {
  CODESIGN_SOLVE_STATUS_CONVERGED = 0,
  CODESIGN_SOLVE_STATUS_MAX_ITERS = 1,
  CODESIGN_SOLVE_STATUS_INFEASIBLE = 2,
  CODESIGN_SOLVE_STATUS_NUMERICAL_FAILURE = 3,
} CodesignSolveStatus;

/**
 * Robot model handle.
 */
typedef struct CodesignModel CodesignModel;

/**
 * Solved motion handle.
 */
typedef struct CodesignMotion CodesignMotion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next library call on the same thread.
 */
const char *codesign_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *codesign_version(void);

/**
 * Creates a handle to the bundled reference arm.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum CodesignStatus codesign_model_reference(struct CodesignModel **out);

/**
 * Parses and validates a model from a NUL-terminated JSON document.
 *
 * # Safety
 * `json` must be a valid C string and `out` valid writable storage.
 */
enum CodesignStatus codesign_model_from_json(const char *json, struct CodesignModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void codesign_model_free(struct CodesignModel *model);

/**
 * Number of joints, 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t codesign_model_n_joints(const struct CodesignModel *model);

/**
 * Writes the 4x4 coupling matrix for `gears[4]` into `out[16]`, row major.
 *
 * # Safety
 * `gears` must hold 4 values and `out` 16.
 */
enum CodesignStatus codesign_coupling_matrix(const double *gears, double *out);

/**
 * Maps motor torque bounds through the transmission of `gears[4]` into
 * joint torque bounds `tau_min[4]`, `tau_max[4]`.
 *
 * # Safety
 * All pointers must reference 4 values.
 */
enum CodesignStatus codesign_joint_torque_limits(const double *gears,
                                                 const double *tau_u_min,
                                                 const double *tau_u_max,
                                                 double *tau_min,
                                                 double *tau_max);

/**
 * Solves the reference pick-and-place motion with default solver settings.
 * `gears` may be NULL to use the model's own ratios. On `Ok` or
 * `NotConverged` a motion handle is stored in `out`.
 *
 * # Safety
 * `model` must be a live handle, `gears` NULL or 4 values, `out` writable.
 */
enum CodesignStatus codesign_solve_motion(const struct CodesignModel *model,
                                          enum CodesignSpace space,
                                          double payload,
                                          const double *gears,
                                          struct CodesignMotion **out);

/**
 * Releases a motion. NULL is ignored.
 *
 * # Safety
 * `motion` must come from this library and not be used afterwards.
 */
void codesign_motion_free(struct CodesignMotion *motion);

/**
 * # Safety
 * `motion` must be a live handle.
 */
enum CodesignSolveStatus codesign_motion_status(const struct CodesignMotion *motion);

/**
 * Objective value, NaN for NULL.
 *
 * # Safety
 * `motion` must be NULL or a live handle.
 */
double codesign_motion_cost(const struct CodesignMotion *motion);

/**
 * Largest deviation of an independent rollout from the stored states, NaN for NULL.
 *
 * # Safety
 * `motion` must be NULL or a live handle.
 */
double codesign_motion_rollout_deviation(const struct CodesignMotion *motion);

/**
 * Number of control intervals N; the trajectory has N+1 states.
 *
 * # Safety
 * `motion` must be NULL or a live handle.
 */
size_t codesign_motion_steps(const struct CodesignMotion *motion);

/**
 * Copies the states, row major `(N+1) x 2n`, into `buf[len]`. The required
 * length is stored in `written` when it is not NULL; call with `buf = NULL`
 * and `len = 0` to query it.
 *
 * # Safety
 * `motion` must be a live handle and `buf` hold `len` values.
 */
enum CodesignStatus codesign_motion_states(const struct CodesignMotion *motion,
                                           double *buf,
                                           size_t len,
                                           size_t *written);

/**
 * Copies the controls, row major `N x m`, like [`codesign_motion_states`].
 *
 * # Safety
 * `motion` must be a live handle and `buf` hold `len` values.
 */
enum CodesignStatus codesign_motion_controls(const struct CodesignMotion *motion,
                                             double *buf,
                                             size_t len,
                                             size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CODESIGN_H */
