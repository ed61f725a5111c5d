#ifndef CONVREC_H
#define CONVREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ConvrecStatus {
  CONVREC_STATUS_OK = 0,
  CONVREC_STATUS_NULL_POINTER = 1,
  CONVREC_STATUS_INVALID_UTF8 = 2,
  CONVREC_STATUS_CONFIG = 3,
  CONVREC_STATUS_DATA = 4,
  CONVREC_STATUS_CHECKPOINT = 5,
  CONVREC_STATUS_NUMERIC = 6,
  /**
   * The call needs data or a model the session does not hold yet.
   */
  CONVREC_STATUS_STATE = 7,
  CONVREC_STATUS_BUFFER_TOO_SMALL = 8,
  CONVREC_STATUS_PANIC = 9,
} ConvrecStatus;

/**
 * Opaque session state.
 */
typedef struct ConvrecSession ConvrecSession;

/**
 * Ranking quality on the test positions.
 */
typedef struct ConvrecMetrics {
  double hr_at_k;
  double ndcg_at_k;
  uintptr_t k;
  uintptr_t evaluated_users;
  uintptr_t excluded_users;
} ConvrecMetrics;

typedef struct ConvrecLayer {
  uintptr_t kernel;
  uintptr_t stride;
} ConvrecLayer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *convrec_last_error(void);

const char *convrec_version(void);

/**
 * Creates a session from a named preset, or from the defaults when `preset`
 * is null.
 *
 * # Safety
 * `preset` must be null or a NUL-terminated string; `out` must be writable.
 */
enum ConvrecStatus convrec_session_new(const char *preset, struct ConvrecSession **out);

/**
 * # Safety
 * `s` must be null or a handle from [`convrec_session_new`] not yet freed.
 */
void convrec_session_free(struct ConvrecSession *s);

/**
 * Sets one configuration key, using the same names as `--set` on the command line.
 *
 * # Safety
 * `s` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum ConvrecStatus convrec_session_set(struct ConvrecSession *s,
                                       const char *key,
                                       const char *value);

/**
 * Loads interactions and, when `item_attributes` is not null, the attribute file.
 * Any model held by the session is dropped.
 *
 * # Safety
 * `s` must be a live handle; paths NUL-terminated strings.
 */
enum ConvrecStatus convrec_session_load_data(struct ConvrecSession *s,
                                             const char *interactions,
                                             const char *item_attributes);

/**
 * Trains a fresh model and, when `out` is not null, writes its test metrics.
 *
 * # Safety
 * `s` must be a live handle; `out` null or writable.
 */
enum ConvrecStatus convrec_session_train(struct ConvrecSession *s, struct ConvrecMetrics *out);

/**
 * Evaluates the held model on the test positions.
 *
 * # Safety
 * `s` must be a live handle; `out` writable.
 */
enum ConvrecStatus convrec_session_evaluate(struct ConvrecSession *s, struct ConvrecMetrics *out);

/**
 * # Safety
 * `s` must be a live handle; `path` a NUL-terminated string.
 */
enum ConvrecStatus convrec_session_save_checkpoint(struct ConvrecSession *s, const char *path);

/**
 * Restores a checkpoint into a model shaped by the current configuration and data.
 *
 * # Safety
 * `s` must be a live handle; `path` a NUL-terminated string.
 */
enum ConvrecStatus convrec_session_load_checkpoint(struct ConvrecSession *s, const char *path);

/**
 * # Safety
 * `s` must be a live handle; `out` writable.
 */
enum ConvrecStatus convrec_session_param_count(struct ConvrecSession *s, uintptr_t *out);

/**
 * Plans the pyramid for an input of `len` rows and writes each block's output
 * length. `out_n` receives the block count even when the buffer is too small.
 *
 * # Safety
 * `layers` must point to `n_layers` entries and `out_lengths` to `capacity` slots.
 */
enum ConvrecStatus convrec_plan_schedule(uintptr_t len,
                                         const struct ConvrecLayer *layers,
                                         uintptr_t n_layers,
                                         uintptr_t *out_lengths,
                                         uintptr_t capacity,
                                         uintptr_t *out_n);

/**
 * Fraction of 1-based ranks within the top `k`.
 *
 * # Safety
 * `ranks` must point to `n` entries; `out` writable.
 */
enum ConvrecStatus convrec_hit_rate(const uintptr_t *ranks, uintptr_t n, uintptr_t k, double *out);

/**
 * Mean discounted gain of 1-based ranks within the top `k`.
 *
 * # Safety
 * `ranks` must point to `n` entries; `out` writable.
 */
enum ConvrecStatus convrec_ndcg(const uintptr_t *ranks, uintptr_t n, uintptr_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVREC_H */
