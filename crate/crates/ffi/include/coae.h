#ifndef COAE_H
#define COAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CoaeStatus {
  COAE_STATUS_OK = 0,
  COAE_STATUS_NULL_POINTER = 1,
  COAE_STATUS_INVALID_ARGUMENT = 2,
  COAE_STATUS_DIMENSION = 3,
  COAE_STATUS_NON_FINITE = 4,
  COAE_STATUS_CONFIG = 5,
  COAE_STATUS_IO = 6,
  COAE_STATUS_CHECKPOINT = 7,
  COAE_STATUS_PANIC = 8,
} CoaeStatus;

/**
 * Opaque model handle.
 */
typedef struct CoaeModel CoaeModel;

typedef struct CoaeBox {
  double x1;
  double y1;
  double x2;
  double y2;
} CoaeBox;

typedef struct CoaeDetection {
  struct CoaeBox bbox;
  double score;
} CoaeDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *coae_version(void);

/**
 * Message of the last failed call on this thread; empty after a
 * success. Valid until the next call on the same thread.
 */
const char *coae_last_error(void);

/**
 * Freshly initialized model. `config` is key = value text or null for
 * the defaults.
 */
enum CoaeStatus coae_model_new(const char *config, uint64_t seed, struct CoaeModel **out);

/**
 * Model with parameters read from a checkpoint file.
 */
enum CoaeStatus coae_model_load(const char *config, const char *checkpoint, struct CoaeModel **out);

enum CoaeStatus coae_model_save(const struct CoaeModel *model, const char *path);

/**
 * Releases a model; null is ignored.
 */
void coae_model_free(struct CoaeModel *model);

/**
 * Image side `S`, query side `Q` and channel count `N` of a model.
 */
enum CoaeStatus coae_model_dims(const struct CoaeModel *model,
                                size_t *image_size,
                                size_t *query_size,
                                size_t *channels);

/**
 * Ranked detections of the query's class. Writes at most `capacity`
 * entries to `out` and the total count to `count`; `out` may be null
 * when `capacity` is zero.
 */
enum CoaeStatus coae_detect(const struct CoaeModel *model,
                            const double *image,
                            size_t image_len,
                            const double *query,
                            size_t query_len,
                            struct CoaeDetection *out,
                            size_t capacity,
                            size_t *count);

/**
 * Co-excitation vector of a pair into `out` (`N` values). Fails with
 * `COAE_STATUS_INVALID_ARGUMENT` when the model has no co-excitation.
 */
enum CoaeStatus coae_coexcitation(const struct CoaeModel *model,
                                  const double *image,
                                  size_t image_len,
                                  const double *query,
                                  size_t query_len,
                                  double *out,
                                  size_t capacity);

enum CoaeStatus coae_iou(const struct CoaeBox *a, const struct CoaeBox *b, double *out);

/**
 * Margin-based ranking loss of `k` scores in `[0, 1]` with 0/1 labels,
 * summed over proposals and pairs.
 */
enum CoaeStatus coae_margin_ranking_loss(const double *scores,
                                         const uint8_t *labels,
                                         size_t k,
                                         double m_plus,
                                         double m_minus,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COAE_H */
