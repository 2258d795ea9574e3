#ifndef RTOPT_H
#define RTOPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum RtoptStatus {
  RTOPT_STATUS_OK = 0,
  // A required pointer was null or a string was not UTF-8.
  RTOPT_STATUS_NULL_OR_INVALID_ARGUMENT = 1,
  // The scenario or an override failed validation.
  RTOPT_STATUS_VALIDATION = 2,
  // The optimizer or a conic subproblem failed.
  RTOPT_STATUS_SOLVER = 3,
  // Reading or writing files failed.
  RTOPT_STATUS_IO = 4,
  // An index was outside the valid range.
  RTOPT_STATUS_OUT_OF_RANGE = 5,
  // An internal panic was caught at the boundary.
  RTOPT_STATUS_PANIC = 6,
} RtoptStatus;

// The in-memory result of a pipeline run.
typedef struct RtoptRun RtoptRun;

// A parsed, validated scenario.
typedef struct RtoptScenario RtoptScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rtopt_version(void);

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into the library on the same thread.
const char *rtopt_last_error_message(void);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string obtained from this library, freed once.
void rtopt_string_free(char *s);

// Parse and validate a scenario from JSON text.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum RtoptStatus rtopt_scenario_from_json(const char *json, struct RtoptScenario **out);

// Parse and validate a scenario file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum RtoptStatus rtopt_scenario_from_file(const char *path, struct RtoptScenario **out);

// Release a scenario. Null is ignored.
//
// # Safety
// `s` must be null or a handle from this library, freed once.
void rtopt_scenario_free(struct RtoptScenario *s);

// The scenario as pretty JSON with every default filled in.
//
// # Safety
// `s` must be a live scenario handle; `out` must be writable.
enum RtoptStatus rtopt_scenario_to_json(const struct RtoptScenario *s, char **out);

// Set the mode: "nto", "nrto" or "nrto-le".
//
// # Safety
// `s` must be a live scenario handle; `mode` a NUL-terminated string.
enum RtoptStatus rtopt_scenario_set_mode(struct RtoptScenario *s, const char *mode);

// Set the number of validation rollouts.
//
// # Safety
// `s` must be a live scenario handle.
enum RtoptStatus rtopt_scenario_set_samples(struct RtoptScenario *s, size_t samples);

// Set the master seed of the Monte-Carlo draws.
//
// # Safety
// `s` must be a live scenario handle.
enum RtoptStatus rtopt_scenario_set_seed(struct RtoptScenario *s, uint64_t seed);

// Set the uncertainty level.
//
// # Safety
// `s` must be a live scenario handle.
enum RtoptStatus rtopt_scenario_set_tau(struct RtoptScenario *s, double tau);

// Solve and validate the scenario in memory.
//
// # Safety
// `s` must be a live scenario handle; `out` must be writable.
enum RtoptStatus rtopt_run(const struct RtoptScenario *s, struct RtoptRun **out);

// Solve, validate and write all artifacts into `out_dir`, like `rtopt run`.
// Sweeps are not supported here.
//
// # Safety
// `s` must be a live scenario handle; `out_dir` a NUL-terminated string.
enum RtoptStatus rtopt_run_to_dir(const struct RtoptScenario *s, const char *out_dir);

// Release a run. Null is ignored.
//
// # Safety
// `r` must be null or a handle from this library, freed once.
void rtopt_run_free(struct RtoptRun *r);

// Final constraint-satisfaction fraction in [0, 1].
//
// # Safety
// `r` must be a live run handle; `out` must be writable.
enum RtoptStatus rtopt_run_satisfaction(const struct RtoptRun *r, double *out);

// Whether the final solve met its convergence test (1) or hit the cap (0).
//
// # Safety
// `r` must be a live run handle; `out` must be writable.
enum RtoptStatus rtopt_run_converged(const struct RtoptRun *r, int32_t *out);

// Horizon `T`, state and control dimensions of the run's policy.
//
// # Safety
// `r` must be a live run handle; the three outputs must be writable.
enum RtoptStatus rtopt_run_dims(const struct RtoptRun *r,
                                size_t *horizon,
                                size_t *n_x,
                                size_t *n_u);

// Copy the nominal control `u_bar_k` into `buf` (length `n_u`).
//
// # Safety
// `r` must be a live run handle; `buf` must hold `len` doubles.
enum RtoptStatus rtopt_run_nominal_control(const struct RtoptRun *r,
                                           size_t k,
                                           double *buf,
                                           size_t len);

// Copy the gain `K_k` into `buf` in row-major order (length `n_u * n_x`).
//
// # Safety
// `r` must be a live run handle; `buf` must hold `len` doubles.
enum RtoptStatus rtopt_run_gain(const struct RtoptRun *r, size_t k, double *buf, size_t len);

// The run's statistics as the JSON written to `stats.json`.
//
// # Safety
// `r` must be a live run handle; `out` must be writable.
enum RtoptStatus rtopt_run_stats_json(const struct RtoptRun *r, char **out);

// The final policy as the JSON written to `policy.json`.
//
// # Safety
// `r` must be a live run handle; `out` must be writable.
enum RtoptStatus rtopt_run_policy_json(const struct RtoptRun *r, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RTOPT_H */
