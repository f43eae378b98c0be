#ifndef AGESTRUCT_H
#define AGESTRUCT_H

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code of every FFI call.
typedef enum AsStatus {
  AS_OK = 0,
  AS_NULL_POINTER = 1,
  AS_INVALID_INPUT = 2,
  AS_SOLVER_FAILURE = 3,
  AS_UTF8_ERROR = 4,
  AS_PANIC = 5,
} AsStatus;

// A computed branch.
typedef struct AsBranch AsBranch;

// A normalized model together with its grids; the unit of work every other
// call operates on.
typedef struct AsProblem AsProblem;

// One branch point in plain C layout.
typedef struct AsBranchPoint {
  double eps;
  double n;
  double r_qu;
  double residual;
  double amplitude;
  bool positive;
  bool sign_flipped;
} AsBranchPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Builds a preset model on the given grids and normalizes its birth
// modulus. `params_json` is a JSON object of preset parameters (numbers or
// strings); it may be null for an empty map, but the required preset keys
// must then be supplied, so in practice it rarely is.
//
// # Safety
// `preset` and `params_json` must be NUL-terminated strings (or null);
// `out` must be a valid pointer.
enum AsStatus as_problem_new(const char *preset,
                             const char *params_json,
                             size_t n_a,
                             size_t n_x,
                             struct AsProblem **out);

// Releases a problem handle. Null is ignored.
//
// # Safety
// `problem` must come from [`as_problem_new`] and not be used afterwards.
void as_problem_free(struct AsProblem *problem);

// Birth normalization factor of the problem.
//
// # Safety
// `problem` must be a live handle; `out` must be writable.
enum AsStatus as_problem_birth_scale(const struct AsProblem *problem, double *out);

// Spectral radius of the normalized low-density reproduction operator
// (1 up to solver tolerance).
//
// # Safety
// `problem` must be a live handle; `out` must be writable.
enum AsStatus as_problem_radius(const struct AsProblem *problem, double *out);

// Branch slope at the bifurcation point: `n(eps) = 1 + slope*eps + o(eps)`.
//
// # Safety
// `problem` must be a live handle; `out_slope` must be writable.
enum AsStatus as_expansion_slope(const struct AsProblem *problem,
                                 double fd_step,
                                 double *out_slope);

// Continues the branch over `eps in +-[eps_max/steps, ..., eps_max]` and
// returns a branch handle. A truncated branch is a solver failure; the
// message names the amplitude where the corrector gave up.
//
// # Safety
// `problem` must be a live handle; `out` must be writable.
enum AsStatus as_branch_compute(const struct AsProblem *problem,
                                double eps_max,
                                size_t steps,
                                struct AsBranch **out);

// Releases a branch handle. Null is ignored.
//
// # Safety
// `branch` must come from [`as_branch_compute`] and not be used afterwards.
void as_branch_free(struct AsBranch *branch);

// Number of points on the branch (points are ordered by amplitude).
//
// # Safety
// `branch` must be a live handle.
size_t as_branch_len(const struct AsBranch *branch);

// Copies point `index` into `out`.
//
// # Safety
// `branch` must be a live handle; `out` must be writable.
enum AsStatus as_branch_point(const struct AsBranch *branch,
                              size_t index,
                              struct AsBranchPoint *out);

// Copies the most recent error message on this thread into `buf`
// (NUL-terminated, truncated to `len`). Returns the full message length,
// so calling with `len == 0` sizes a buffer.
//
// # Safety
// `buf` must point to `len` writable bytes (or be null with `len == 0`).
size_t as_last_error_message(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGESTRUCT_H */
