#ifndef AERMAN_H
#define AERMAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  AM_STATUS_OK = 0,
  AM_STATUS_NULL_POINTER = 1,
  /**
   * A buffer length did not match the model dimensions, or a value was out of range.
   */
  AM_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Euler-angle, free-fall or decoupling singularity.
   */
  AM_STATUS_SINGULARITY = 3,
  /**
   * Ill-conditioning, a Riccati failure or a non-finite result.
   */
  AM_STATUS_NUMERICAL = 4,
  AM_STATUS_CONFIG = 5,
  AM_STATUS_IO = 6,
  AM_STATUS_PANIC = 7,
} AmStatus;

/**
 * Opaque CLF-QP controller bound to a model's joint count.
 */
typedef struct AmController AmController;

/**
 * Opaque manipulator model.
 */
typedef struct AmModel AmModel;

typedef struct {
  double value;
  double value_rate;
  double lambda;
  /**
   * Nonzero when the decrease constraint was active.
   */
  int32_t active;
} AmStepInfo;

typedef struct {
  /**
   * Nonzero when the run reached its final time without a guard trip.
   */
  int32_t completed;
  double t_final;
  size_t control_steps;
  double final_h_norm;
  double zoh_constant;
  double max_model_decrease_violation;
  size_t events_applied;
} AmSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Owned by the library; valid until
 * the next failing call on the same thread.
 */
const char *am_last_error(void);

/**
 * Two-link planar arm with the default parameters.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
AmStatus am_model_two_link(AmModel **out);

/**
 * Model from a TOML parameter file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as for [`am_model_two_link`].
 */
AmStatus am_model_load(const char *path, AmModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void am_model_free(AmModel *model);

/**
 * Number of joints `k`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t am_model_joint_count(const AmModel *model);

/**
 * Lengths of the extended state, the extended input and a packed flat signal.
 *
 * # Safety
 * `model` must be a live handle; each output pointer may be null.
 */
AmStatus am_model_dims(const AmModel *model, size_t *state, size_t *input, size_t *flat);

/**
 * Time derivative of the extended state under an extended input.
 *
 * # Safety
 * Buffers must hold the stated number of `double`s.
 */
AmStatus am_extended_dynamics(const AmModel *model,
                              const double *state,
                              size_t state_len,
                              const double *input,
                              size_t input_len,
                              double *out,
                              size_t out_len);

/**
 * Flat outputs and their derivatives up to the auxiliary-input order.
 *
 * # Safety
 * Buffers must hold the stated number of `double`s.
 */
AmStatus am_flat_outputs(const AmModel *model,
                         const double *state,
                         size_t state_len,
                         const double *input,
                         size_t input_len,
                         double *flat,
                         size_t flat_len);

/**
 * Extended state recovered from a packed flat signal. Third derivatives of `p_e` are ignored.
 *
 * # Safety
 * Buffers must hold the stated number of `double`s.
 */
AmStatus am_state_from_flat(const AmModel *model,
                            const double *flat,
                            size_t flat_len,
                            double *state,
                            size_t state_len);

/**
 * Controller with a diagonal CLF weight. A null `q_diag` means the identity. A
 * non-positive or NaN `lambda` selects the rate derived from the Riccati solution.
 *
 * # Safety
 * `model` must be a live handle, `q_diag` null or `q_len` readable `double`s.
 */
AmStatus am_controller_new(const AmModel *model,
                           const double *q_diag,
                           size_t q_len,
                           double lambda,
                           AmController **out);

/**
 * # Safety
 * `ctrl` must be null or a handle from this library not yet freed.
 */
void am_controller_free(AmController *ctrl);

/**
 * Decrease rate in use, or NaN for a null handle.
 *
 * # Safety
 * `ctrl` must be null or a live handle.
 */
double am_controller_lambda(const AmController *ctrl);

/**
 * One CLF-QP solve: extended input for `state` tracking the packed `reference`.
 *
 * # Safety
 * Buffers must hold the stated number of `double`s; `info` may be null.
 */
AmStatus am_controller_step(const AmController *ctrl,
                            const double *state,
                            size_t state_len,
                            const double *reference,
                            size_t reference_len,
                            double *input,
                            size_t input_len,
                            AmStepInfo *info);

/**
 * Runs a scenario file. When `csv_path` is non-null the trajectory is written there.
 *
 * # Safety
 * `config` and `csv_path` must be null or NUL-terminated; `summary` may be null.
 */
AmStatus am_simulate(const char *config, const char *csv_path, AmSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AERMAN_H */
