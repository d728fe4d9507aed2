#ifndef EDITLAB_H
#define EDITLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EditlabStatus {
  EDITLAB_STATUS_OK = 0,
  EDITLAB_STATUS_NULL_POINTER = 1,
  EDITLAB_STATUS_INVALID_ARGUMENT = 2,
  EDITLAB_STATUS_PRECONDITION = 3,
  EDITLAB_STATUS_NUMERIC = 4,
  EDITLAB_STATUS_IO = 5,
  EDITLAB_STATUS_INTERNAL = 6,
  EDITLAB_STATUS_PANIC = 7,
} EditlabStatus;

/**
 * Experiment configuration.
 */
typedef struct EditlabConfig EditlabConfig;

/**
 * Corpus and pretrained base model for one seed.
 */
typedef struct EditlabSession EditlabSession;

/**
 * Hypernetwork meta-trainer bound to a session's training split.
 */
typedef struct EditlabTrainer EditlabTrainer;

/**
 * Editing metrics in one style.
 */
typedef struct EditlabMetrics {
  double efficacy;
  double generalization;
  double specificity;
  size_t n_evaluated;
} EditlabMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *editlab_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`) and returns the full message length
 * in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t editlab_last_error(char *buf, size_t len);

/**
 * Creates a config from a preset name (`paper`, `desk` or `trend`).
 *
 * # Safety
 * `preset` must be a valid C string and `out` a valid pointer.
 */
enum EditlabStatus editlab_config_new(const char *preset, struct EditlabConfig **out);

/**
 * Sets a dotted config key, e.g. `trainer.eta` to `0.1`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum EditlabStatus editlab_config_set(struct EditlabConfig *config,
                                      const char *key,
                                      const char *value);

/**
 * Writes the 64-character hex config hash plus a terminator into `buf`.
 *
 * # Safety
 * `config` must be valid and `buf` must hold at least 65 bytes.
 */
enum EditlabStatus editlab_config_hash(const struct EditlabConfig *config, char *buf, size_t len);

/**
 * # Safety
 * `config` must be null or a handle from [`editlab_config_new`], not yet freed.
 */
void editlab_config_free(struct EditlabConfig *config);

/**
 * Generates the corpus and pretrains the base model for `seed`.
 * Fails with `EDITLAB_STATUS_PRECONDITION` when the unedited model does not
 * reach the configured specificity floor.
 *
 * # Safety
 * `config` and `out` must be valid.
 */
enum EditlabStatus editlab_session_prepare(const struct EditlabConfig *config,
                                           uint64_t seed,
                                           struct EditlabSession **out);

/**
 * Metrics of the unedited model on the held-out split.
 *
 * # Safety
 * All pointers must be valid.
 */
enum EditlabStatus editlab_session_base_metrics(const struct EditlabSession *session,
                                                struct EditlabMetrics *argmax,
                                                struct EditlabMetrics *prob);

/**
 * Writes the session's corpus as JSON lines.
 *
 * # Safety
 * All pointers must be valid.
 */
enum EditlabStatus editlab_session_save_corpus(const struct EditlabSession *session,
                                               const char *path);

/**
 * # Safety
 * `session` must be null or a live handle.
 */
void editlab_session_free(struct EditlabSession *session);

/**
 * Creates a meta-trainer with the session config's trainer settings.
 *
 * # Safety
 * `session` and `out` must be valid.
 */
enum EditlabStatus editlab_trainer_new(const struct EditlabSession *session,
                                       struct EditlabTrainer **out);

/**
 * Runs `iterations` more meta-training iterations.
 *
 * # Safety
 * `trainer` must be valid.
 */
enum EditlabStatus editlab_trainer_run(struct EditlabTrainer *trainer, size_t iterations);

/**
 * Iterations completed so far, or 0 for a null handle.
 *
 * # Safety
 * `trainer` must be null or valid.
 */
size_t editlab_trainer_iterations(const struct EditlabTrainer *trainer);

/**
 * Edits the session's held-out split with the trained hypernetworks and
 * scores it in both metric styles.
 *
 * # Safety
 * All pointers must be valid.
 */
enum EditlabStatus editlab_trainer_evaluate(const struct EditlabTrainer *trainer,
                                            const struct EditlabSession *session,
                                            struct EditlabMetrics *argmax,
                                            struct EditlabMetrics *prob);

/**
 * Saves base model, config and trainer state as a checkpoint.
 *
 * # Safety
 * All pointers must be valid.
 */
enum EditlabStatus editlab_trainer_save(const struct EditlabTrainer *trainer,
                                        const struct EditlabSession *session,
                                        const char *path);

/**
 * # Safety
 * `trainer` must be null or a live handle.
 */
void editlab_trainer_free(struct EditlabTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDITLAB_H */
