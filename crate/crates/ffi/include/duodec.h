/* Generated by cbindgen from duodec-ffi. Do not edit. */

#ifndef DUODEC_H
#define DUODEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define DUODEC_MODE_VANILLA 0

#define DUODEC_MODE_SPS 1

#define DUODEC_MODE_DUO 2

typedef enum DuodecStatus {
  DUODEC_STATUS_OK = 0,
  DUODEC_STATUS_NULL_ARG = 1,
  /**
   * Invalid configuration or arguments.
   */
  DUODEC_STATUS_CONFIG = 2,
  /**
   * A model or profile could not be read or parsed.
   */
  DUODEC_STATUS_LOAD = 3,
  DUODEC_STATUS_INTERNAL = 5,
} DuodecStatus;

typedef struct DuodecModel DuodecModel;

typedef struct DuodecProfile DuodecProfile;

typedef struct DuodecResult DuodecResult;

/**
 * Generation settings. Start from [`duodec_config_default`].
 */
typedef struct DuodecConfig {
  /**
   * One of the `DUODEC_MODE_*` constants.
   */
  uint32_t mode;
  /**
   * Draft budget; 0 calibrates it on the run's clock.
   */
  uintptr_t gamma;
  uintptr_t max_sequences;
  uintptr_t max_new_tokens;
  /**
   * Values <= 0 keep each model's own temperature.
   */
  double temperature;
  uint64_t draft_seed;
  uint64_t verify_seed;
  /**
   * Run both roles on the calling thread.
   */
  bool inline_executor;
} DuodecConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into this library on the same thread.
 */
const char *duodec_last_error(void);

/**
 * Static version string.
 */
const char *duodec_version(void);

/**
 * Loads a model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DuodecStatus duodec_model_load(const char *path, struct DuodecModel **out);

/**
 * Parses a model from text in the model file format.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DuodecStatus duodec_model_parse(const char *text, struct DuodecModel **out);

/**
 * # Safety
 * `model` must come from this library or be NULL.
 */
uintptr_t duodec_model_vocab_size(const struct DuodecModel *model);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. NULL is
 * ignored.
 */
void duodec_model_free(struct DuodecModel *model);

/**
 * Loads a device profile file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DuodecStatus duodec_profile_load(const char *path, struct DuodecProfile **out);

/**
 * Built-in profile by name.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DuodecStatus duodec_profile_preset(const char *name, struct DuodecProfile **out);

/**
 * Profile from latencies in milliseconds.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DuodecStatus duodec_profile_new(double draft_per_token_ms,
                                     double target_base_ms,
                                     double target_slope_ms,
                                     double comm_ms,
                                     struct DuodecProfile **out);

/**
 * # Safety
 * `profile` must come from this library and not be used afterwards.
 */
void duodec_profile_free(struct DuodecProfile *profile);

struct DuodecConfig duodec_config_default(void);

/**
 * Generates tokens after `prompt`.
 *
 * `draft` may be NULL in vanilla mode. `profile` NULL bills measured wall
 * time. `prompt` may be NULL when `prompt_len` is 0.
 *
 * # Safety
 * Handles must come from this library; `prompt` must point to `prompt_len`
 * readable ids; `config` and `out` must be valid pointers.
 */
enum DuodecStatus duodec_generate(const struct DuodecModel *target,
                                  const struct DuodecModel *draft,
                                  const struct DuodecProfile *profile,
                                  const uint32_t *prompt,
                                  uintptr_t prompt_len,
                                  const struct DuodecConfig *config,
                                  struct DuodecResult **out);

/**
 * Number of generated tokens.
 *
 * # Safety
 * `result` must come from this library or be NULL.
 */
uintptr_t duodec_result_len(const struct DuodecResult *result);

/**
 * Copies up to `cap` token ids into `buf` and returns the total count.
 *
 * # Safety
 * `buf` must have room for `cap` ids, or be NULL with `cap` 0.
 */
uintptr_t duodec_result_tokens(const struct DuodecResult *result, uint32_t *buf, uintptr_t cap);

/**
 * # Safety
 * `result` must come from this library or be NULL.
 */
uintptr_t duodec_result_iterations(const struct DuodecResult *result);

/**
 * # Safety
 * `result` must come from this library or be NULL.
 */
double duodec_result_ttft_ms(const struct DuodecResult *result);

/**
 * # Safety
 * `result` must come from this library or be NULL.
 */
double duodec_result_total_ms(const struct DuodecResult *result);

/**
 * # Safety
 * `result` must come from this library or be NULL.
 */
double duodec_result_tps(const struct DuodecResult *result);

/**
 * The whole result as JSON. Free with [`duodec_string_free`].
 *
 * # Safety
 * `result` must come from this library or be NULL.
 */
char *duodec_result_to_json(const struct DuodecResult *result);

/**
 * # Safety
 * `result` must come from this library and not be used afterwards.
 */
void duodec_result_free(struct DuodecResult *result);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void duodec_string_free(char *s);

/**
 * Measures the cost coefficient and picks a budget. `trials` 0 uses the
 * default; `profile` NULL measures wall time.
 *
 * # Safety
 * Handles must come from this library; `out_c` and `out_gamma` must be
 * valid pointers.
 */
enum DuodecStatus duodec_calibrate(const struct DuodecModel *target,
                                   const struct DuodecModel *draft,
                                   const struct DuodecProfile *profile,
                                   uintptr_t trials,
                                   double *out_c,
                                   uintptr_t *out_gamma);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUODEC_H */
