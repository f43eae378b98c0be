/* Minimal C consumer: build a preset, normalize, continue the branch.
 *
 * Build (from the workspace root, after `cargo build -p agestruct-ffi`):
 *   cc crates/ffi/examples/branch.c -Icrates/ffi/include \
 *      target/debug/libagestruct_ffi.a -lm -o branch_demo
 */
#include <stdio.h>
#include <stdlib.h>

#include "agestruct.h"

static void fail(const char *what) {
  char message[256];
  as_last_error_message(message, sizeof message);
  fprintf(stderr, "%s: %s\n", what, message);
  exit(1);
}

int main(void) {
  AsProblem *problem = NULL;
  AsStatus status = as_problem_new("Neumann33",
                                   "{\"a_max\":1.0,\"mu0\":1.0,\"d\":0.1}",
                                   200, 16, &problem);
  if (status != AS_OK) fail("as_problem_new");

  double scale = 0.0, radius = 0.0, slope = 0.0;
  as_problem_birth_scale(problem, &scale);
  as_problem_radius(problem, &radius);
  if (as_expansion_slope(problem, 1e-4, &slope) != AS_OK) fail("expansion");
  printf("birth_scale=%.12g r_Q0=%.12g zeta=%.12g\n", scale, radius, slope);

  AsBranch *branch = NULL;
  if (as_branch_compute(problem, 0.2, 10, &branch) != AS_OK) fail("branch");
  size_t len = as_branch_len(branch);
  for (size_t i = 0; i < len; i++) {
    AsBranchPoint p;
    as_branch_point(branch, i, &p);
    printf("eps=% .4f n=%.9f r_Qu=%.9f positive=%d\n",
           p.eps, p.n, p.r_qu, (int)p.positive);
  }

  as_branch_free(branch);
  as_problem_free(problem);
  return 0;
}
