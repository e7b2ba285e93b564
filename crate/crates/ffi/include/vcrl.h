#ifndef VCRL_H
#define VCRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VcrlStatus {
  VCRL_STATUS_OK = 0,
  VCRL_STATUS_NULL_POINTER = 1,
  VCRL_STATUS_INVALID_ARGUMENT = 2,
  VCRL_STATUS_CONFIG = 3,
  VCRL_STATUS_IO = 4,
  VCRL_STATUS_PARSE = 5,
  VCRL_STATUS_RUNTIME = 6,
  VCRL_STATUS_BUFFER_TOO_SMALL = 7,
  VCRL_STATUS_PANIC = 8,
} VcrlStatus;

/**
 * Replay bank handle.
 */
typedef struct VcrlBank VcrlBank;

/**
 * Training handle.
 */
typedef struct VcrlTrainer VcrlTrainer;

/**
 * Scalar per-step metrics.
 */
typedef struct VcrlStepMetrics {
  uint64_t step;
  double mean_reward;
  double mean_response_length;
  double mean_entropy;
  double grad_norm;
  double objective_value;
  double kappa;
  uint64_t groups_removed;
  uint64_t bank_size;
  uint64_t bank_popped;
  uint64_t bank_pushed;
  uint64_t mask_retained;
  uint64_t batch_groups;
  bool zero_update;
  uint64_t max_replay_count;
} VcrlStepMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length excluding the NUL.
 * Pass `buf = NULL` to query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t vcrl_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vcrl_version(void);

/**
 * Unbiased variance `k(G-k) / (G(G-1))` of a binary group.
 *
 * # Safety
 * `out` must be null or a valid pointer.
 */
enum VcrlStatus vcrl_binary_variance(size_t g, size_t k, double *out);

/**
 * Largest attainable unbiased variance for group size `g`.
 *
 * # Safety
 * `out` must be null or a valid pointer.
 */
enum VcrlStatus vcrl_max_group_variance(size_t g, double *out);

/**
 * Normalised variance `p` of `len` rewards in `[0, 1]`.
 *
 * # Safety
 * `rewards` must point to `len` readable doubles; `out` must be valid.
 */
enum VcrlStatus vcrl_normalized_p(const double *rewards, size_t len, double *out);

/**
 * Creates a bank. `capacity = 0` means unbounded.
 *
 * # Safety
 * `out` must be a valid pointer; the handle must be released with
 * [`vcrl_bank_free`].
 */
enum VcrlStatus vcrl_bank_new(double momentum,
                              uint32_t max_replays,
                              size_t capacity,
                              struct VcrlBank **out);

/**
 * # Safety
 * `bank` must be null or a handle from [`vcrl_bank_new`] not yet freed.
 */
void vcrl_bank_free(struct VcrlBank *bank);

/**
 * Inserts or refreshes a query; `accepted` reports whether it was stored.
 *
 * # Safety
 * `bank` must be a live handle; `accepted` may be null.
 */
enum VcrlStatus vcrl_bank_push(struct VcrlBank *bank, uint32_t query_id, double p, bool *accepted);

/**
 * Pops up to `m` queries in priority order into `out_ids` (capacity
 * `out_cap`), writing the count to `out_len`. Fails with
 * `VCRL_STATUS_BUFFER_TOO_SMALL`, popping nothing, if `out_cap < min(m, len)`.
 *
 * # Safety
 * `bank` must be a live handle; `out_ids` must point to `out_cap` writable
 * `uint32_t`; `out_len` must be valid.
 */
enum VcrlStatus vcrl_bank_pop(struct VcrlBank *bank,
                              size_t m,
                              uint32_t *out_ids,
                              size_t out_cap,
                              size_t *out_len);

/**
 * Ages every entry by one step with momentum `alpha`.
 *
 * # Safety
 * `bank` must be a live handle.
 */
enum VcrlStatus vcrl_bank_tick(struct VcrlBank *bank, double alpha);

/**
 * Number of resident entries, or 0 for a null handle.
 *
 * # Safety
 * `bank` must be null or a live handle.
 */
size_t vcrl_bank_len(const struct VcrlBank *bank);

/**
 * Lifetime pop count of a query, or 0 for a null handle.
 *
 * # Safety
 * `bank` must be null or a live handle.
 */
uint32_t vcrl_bank_replay_count(const struct VcrlBank *bank, uint32_t query_id);

/**
 * Creates a trainer over a corpus file. `config` holds optional
 * `key = value` lines (same keys as the CLI config file) applied over the
 * built-in defaults; pass null for defaults.
 *
 * # Safety
 * `corpus_path` must be a NUL-terminated string; `config` null or
 * NUL-terminated; `out` valid. Release with [`vcrl_trainer_free`].
 */
enum VcrlStatus vcrl_trainer_new(const char *corpus_path,
                                 const char *config,
                                 struct VcrlTrainer **out);

/**
 * # Safety
 * `trainer` must be null or a handle from [`vcrl_trainer_new`] not yet freed.
 */
void vcrl_trainer_free(struct VcrlTrainer *trainer);

/**
 * Runs one training step; `out` (may be null) receives its metrics.
 *
 * # Safety
 * `trainer` must be a live handle; `out` null or valid.
 */
enum VcrlStatus vcrl_trainer_step(struct VcrlTrainer *trainer, struct VcrlStepMetrics *out);

/**
 * Steps completed so far, or 0 for a null handle.
 *
 * # Safety
 * `trainer` must be null or a live handle.
 */
uint64_t vcrl_trainer_current_step(const struct VcrlTrainer *trainer);

/**
 * Writes a resumable checkpoint file.
 *
 * # Safety
 * `trainer` must be a live handle; `path` NUL-terminated.
 */
enum VcrlStatus vcrl_trainer_save_checkpoint(const struct VcrlTrainer *trainer, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VCRL_H */
