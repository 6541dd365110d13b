/* C API for the gsno workbench.
 *
 * Conventions:
 *  - Constructors return an opaque pointer, or NULL on failure.
 *  - Fallible operations return a status code: 0 success, 1 numerical
 *    failure, 2 usage or format error.
 *  - After any failure, gsno_last_error_message() returns a
 *    thread-local, null-terminated description valid until the next
 *    failing call on the same thread.
 *  - Every pointer returned by a _new/_load function must be released
 *    with the matching _free; _free accepts NULL.
 */

#ifndef GSNO_H
#define GSNO_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef struct GsnoFamily GsnoFamily;
typedef struct GsnoModel GsnoModel;

/* Feedback law selectors for gsno_simulate. */
#define GSNO_LAW_OPEN 0
#define GSNO_LAW_LINEAR 1
#define GSNO_LAW_EXACT_GS 2
#define GSNO_LAW_NEURAL_GS 3

/* Termination codes written by gsno_simulate. */
#define GSNO_TERM_COMPLETED 0
#define GSNO_TERM_DOMAIN_EXIT 1
#define GSNO_TERM_BLOW_UP 2

const char *gsno_last_error_message(void);
const char *gsno_version(void);

/* Recirculation families. */
GsnoFamily *gsno_family_chebyshev(double amplitude, double gamma,
                                  double nu_box);
GsnoFamily *gsno_family_constant(double b, double nu_box);
void gsno_family_free(GsnoFamily *family);

/* Trained operator models (binary format written by `gsno train`). */
int gsno_model_load(const char *path, GsnoModel **out);
size_t gsno_model_n_sensors(const GsnoModel *model);
void gsno_model_free(GsnoModel *model);

/* Exact backstepping kernel k(., nu) on the uniform n-point grid over
 * [0, 1]; out_k must hold n doubles. */
int gsno_kernel_solve(const GsnoFamily *family, double nu, size_t n,
                      double *out_k);

/* Operator inference: beta holds the recirculation samples at the
 * model's sensor points (length gsno_model_n_sensors); the prediction
 * at the n_query points query_xs is written to out_k. */
int gsno_kernel_infer(const GsnoModel *model, const double *beta,
                      size_t n_beta, const double *query_xs, size_t n_query,
                      double *out_k);

/* Closed-loop simulation from the initial state u0 (length n, defining
 * the spatial grid) until t_end with step dt. model is required for
 * GSNO_LAW_NEURAL_GS and ignored otherwise. On success the termination
 * code and final L2 norm are written (out pointers may be NULL);
 * instability is a recorded outcome, not an error. */
int gsno_simulate(const GsnoFamily *family, int law, const GsnoModel *model,
                  const double *u0, size_t n, double dt, double t_end,
                  int *out_termination, double *out_final_omega);

#ifdef __cplusplus
}
#endif

#endif /* GSNO_H */
