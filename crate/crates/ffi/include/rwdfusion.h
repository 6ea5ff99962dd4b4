#ifndef RWDFUSION_H
#define RWDFUSION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum RwdStatus {
  RWD_STATUS_OK = 0,
  RWD_STATUS_NULL_POINTER = 1,
  /**
   * Bad UTF-8, unknown method / column, buffer too small.
   */
  RWD_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Configuration rejected.
   */
  RWD_STATUS_CONFIG = 3,
  /**
   * An estimator or data generator failed.
   */
  RWD_STATUS_ESTIMATION = 4,
  RWD_STATUS_IO = 5,
  RWD_STATUS_PANIC = 6,
} RwdStatus;

/**
 * Experiment configuration.
 */
typedef struct RwdConfig RwdConfig;

/**
 * A generated dataset.
 */
typedef struct RwdDataset RwdDataset;

/**
 * One method's estimate.
 */
typedef struct RwdEstimate RwdEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *rwd_last_error(void);

/**
 * Default configuration. Never null.
 */
struct RwdConfig *rwd_config_default(void);

/**
 * Parses a config text (`key = value` lines).
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` a valid pointer.
 */
enum RwdStatus rwd_config_parse(const char *text, struct RwdConfig **out);

/**
 * Sets one key, with the same names and syntax as the config file.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` NUL-terminated.
 */
enum RwdStatus rwd_config_set(struct RwdConfig *cfg, const char *key, const char *value);

/**
 * Renders the configuration; release with [`rwd_string_free`]. Null if
 * `cfg` is null.
 *
 * # Safety
 * `cfg` must come from this library or be null.
 */
char *rwd_config_render(const struct RwdConfig *cfg);

/**
 * # Safety
 * `cfg` must come from this library (or be null) and not be used again.
 */
void rwd_config_free(struct RwdConfig *cfg);

/**
 * # Safety
 * `s` must come from this library (or be null) and not be used again.
 */
void rwd_string_free(char *s);

/**
 * Generates replication `rep` of the configured scenario at the first
 * grid psi.
 *
 * # Safety
 * `cfg` must come from this library; output pointers must be valid.
 */
enum RwdStatus rwd_simulate(const struct RwdConfig *cfg,
                            uint64_t rep,
                            struct RwdDataset **out_rct,
                            struct RwdDataset **out_rwd);

/**
 * Number of rows; 0 for null.
 *
 * # Safety
 * `data` must come from this library or be null.
 */
size_t rwd_dataset_len(const struct RwdDataset *data);

/**
 * Copies column `name` (`x1`, `a`, `y`, ...) into `buf`, which must hold
 * at least [`rwd_dataset_len`] values.
 *
 * # Safety
 * `data` must come from this library; `buf` must have room for `cap` doubles.
 */
enum RwdStatus rwd_dataset_column(const struct RwdDataset *data,
                                  const char *name,
                                  double *buf,
                                  size_t cap);

/**
 * # Safety
 * `data` must come from this library (or be null) and not be used again.
 */
void rwd_dataset_free(struct RwdDataset *data);

/**
 * Runs one registry method on a trial and an observational dataset.
 * Bootstrapped methods get percentile intervals.
 *
 * # Safety
 * Handles must come from this library; `method` NUL-terminated.
 */
enum RwdStatus rwd_estimate(const struct RwdConfig *cfg,
                            const char *method,
                            const struct RwdDataset *rct,
                            const struct RwdDataset *rwd,
                            uint64_t seed,
                            struct RwdEstimate **out_est);

/**
 * Point estimate; NaN for null.
 *
 * # Safety
 * `est` must come from this library or be null.
 */
double rwd_estimate_tau(const struct RwdEstimate *est);

/**
 * Variance estimate; NaN for null.
 *
 * # Safety
 * `est` must come from this library or be null.
 */
double rwd_estimate_variance(const struct RwdEstimate *est);

/**
 * 95% interval into `lower` / `upper`.
 *
 * # Safety
 * `est` must come from this library; `lower`, `upper` valid pointers.
 */
enum RwdStatus rwd_estimate_ci(const struct RwdEstimate *est, double *lower, double *upper);

/**
 * Learning weight on the observational data, or NaN if the method has none.
 *
 * # Safety
 * `est` must come from this library or be null.
 */
double rwd_estimate_weight(const struct RwdEstimate *est);

/**
 * # Safety
 * `est` must come from this library (or be null) and not be used again.
 */
void rwd_estimate_free(struct RwdEstimate *est);

/**
 * Runs the whole grid and writes the CSV and SVG outputs into `out_dir`.
 *
 * # Safety
 * `cfg` must come from this library; `out_dir` NUL-terminated.
 */
enum RwdStatus rwd_run_grid(const struct RwdConfig *cfg, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RWDFUSION_H */
