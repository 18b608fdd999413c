#ifndef SPECDEC_H
#define SPECDEC_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpdMode {
  SPD_MODE_VANILLA = 0,
  SPD_MODE_OWL = 1,
  SPD_MODE_OWL_NOSPEC = 2,
  SPD_MODE_SUFFIX = 3,
  SPD_MODE_HYBRID = 4,
} SpdMode;

typedef enum SpdStatus {
  SPD_STATUS_OK = 0,
  SPD_STATUS_NULL_POINTER = 1,
  SPD_STATUS_INVALID_UTF8 = 2,
  SPD_STATUS_IO = 3,
  SPD_STATUS_FORMAT = 4,
  SPD_STATUS_INVALID_ARGUMENT = 5,
  SPD_STATUS_MISSING_DRAFTER = 6,
  SPD_STATUS_BUFFER_TOO_SMALL = 7,
  SPD_STATUS_INTERNAL = 8,
} SpdStatus;

/**
 * Drafter weights handle.
 */
typedef struct SpdDrafter SpdDrafter;

/**
 * Target model handle.
 */
typedef struct SpdModel SpdModel;

typedef struct SpdEngineParams {
  enum SpdMode mode;
  uint32_t tree_size;
  uint32_t top_k;
  uint32_t depth;
  /**
   * Nonzero appends `[SPEC]` tokens in tree steps.
   */
  uint8_t spec_token;
  double threshold_c;
  double max_spec_factor;
  uint32_t max_suffix_depth;
  uint32_t max_new_tokens;
} SpdEngineParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *spd_last_error(void);

/**
 * Fills `out` with the engine defaults (hybrid mode).
 *
 * # Safety
 * `out` must be null or point to writable memory for one `SpdEngineParams`.
 */
enum SpdStatus spd_engine_params_default(struct SpdEngineParams *out);

/**
 * Writes the drafter output scale for `depth` and `dim` to `alpha` and the
 * unscaled base to `alpha0`. Either pointer may be null.
 *
 * # Safety
 * Non-null pointers must be writable.
 */
enum SpdStatus spd_compute_alpha(uint32_t depth, uint32_t dim, double *alpha, double *alpha0);

/**
 * Creates a seeded target model; `vocab` excludes `[SPEC]`.
 *
 * # Safety
 * `out` must point to writable storage for one handle pointer.
 */
enum SpdStatus spd_model_seed(uint32_t vocab,
                              uint32_t hidden,
                              uint32_t layers,
                              uint32_t heads,
                              uint64_t seed,
                              struct SpdModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpdStatus spd_model_load(const char *path, struct SpdModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum SpdStatus spd_model_save(const struct SpdModel *model, const char *path);

/**
 * Real vocabulary size (the `[SPEC]` id).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t spd_model_vocab(const struct SpdModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void spd_model_free(struct SpdModel *model);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpdStatus spd_drafter_load(const char *path, struct SpdDrafter **out);

/**
 * # Safety
 * `drafter` must be null or a handle not yet freed.
 */
void spd_drafter_free(struct SpdDrafter *drafter);

/**
 * Decodes `prompt` and writes up to `capacity` tokens to `out_tokens`.
 * `out_len` receives the full output length; `BufferTooSmall` is returned
 * (with the prefix written) when it exceeds `capacity`. `mean_al` may be
 * null; it receives NaN when no verification step ran. Either drafter may
 * be null if `params->mode` does not need it.
 *
 * # Safety
 * Handles must be live; `prompt` must hold `prompt_len` ids and
 * `out_tokens` room for `capacity` ids.
 */
enum SpdStatus spd_generate(const struct SpdModel *model,
                            const struct SpdDrafter *drafter_spec,
                            const struct SpdDrafter *drafter_nospec,
                            const struct SpdEngineParams *params,
                            const uint32_t *prompt,
                            uintptr_t prompt_len,
                            uint32_t *out_tokens,
                            uintptr_t capacity,
                            uintptr_t *out_len,
                            double *mean_al);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECDEC_H */
