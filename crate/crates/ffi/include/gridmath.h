#ifndef GRIDMATH_H
#define GRIDMATH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GmLayout {
  GM_LAYOUT_ROW_BLOCK = 0,
  GM_LAYOUT_COL_BLOCK = 1,
  /**
   * Whole matrix on worker 0.
   */
  GM_LAYOUT_SINGLE = 2,
  /**
   * Near-square grid over all workers.
   */
  GM_LAYOUT_GRID = 3,
} GmLayout;

typedef enum GmPrecision {
  GM_PRECISION_HALF = 0,
  GM_PRECISION_SINGLE = 1,
  GM_PRECISION_DOUBLE = 2,
} GmPrecision;

typedef enum GmStatus {
  GM_STATUS_OK = 0,
  GM_STATUS_NULL_POINTER = 1,
  GM_STATUS_INVALID_ARGUMENT = 2,
  GM_STATUS_UNKNOWN_MATRIX = 3,
  GM_STATUS_OUT_OF_MEMORY = 4,
  GM_STATUS_REPLICATION = 5,
  GM_STATUS_IO = 6,
  GM_STATUS_TRANSPORT = 7,
  GM_STATUS_CHECKPOINT = 8,
  GM_STATUS_WORKER = 9,
  GM_STATUS_PANIC = 10,
  GM_STATUS_OTHER = 11,
} GmStatus;

/**
 * Opaque session handle.
 */
typedef struct GmSession GmSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `len` bytes, into `buf`. Returns the full message length
 * excluding the terminator; pass a null `buf` to query it.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes of writes.
 */
size_t gm_last_error(char *buf, size_t len);

/**
 * Starts `workers` in-process workers.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum GmStatus gm_session_new(uint32_t workers, bool deterministic, struct GmSession **out);

/**
 * Shuts the workers down and frees the handle. Null is ignored.
 *
 * # Safety
 * `s` must come from `gm_session_new` or `gm_session_restore` and not be
 * used afterwards.
 */
void gm_session_free(struct GmSession *s);

/**
 * Number of workers, or 0 for a null session.
 *
 * # Safety
 * `s` must be null or a live session.
 */
uint32_t gm_session_workers(const struct GmSession *s);

/**
 * # Safety
 * `s` must be a live session; `out` valid for one write.
 */
enum GmStatus gm_matrix_create(struct GmSession *s,
                               size_t rows,
                               size_t cols,
                               enum GmPrecision precision_,
                               enum GmLayout layout,
                               uint64_t *out);

/**
 * # Safety
 * `s` must be a live session.
 */
enum GmStatus gm_matrix_destroy(struct GmSession *s, uint64_t m);

/**
 * Writes the full matrix from `len` row-major doubles.
 *
 * # Safety
 * `s` must be a live session; `data` valid for `len` reads.
 */
enum GmStatus gm_matrix_set(struct GmSession *s, uint64_t m, const double *data, size_t len);

/**
 * Reads the full matrix as `len` row-major doubles.
 *
 * # Safety
 * `s` must be a live session; `out` valid for `len` writes.
 */
enum GmStatus gm_matrix_get(struct GmSession *s, uint64_t m, double *out, size_t len);

/**
 * Fills with uniform values in [lo, hi) keyed on the global element index.
 *
 * # Safety
 * `s` must be a live session.
 */
enum GmStatus gm_fill_uniform(struct GmSession *s, uint64_t m, uint64_t seed, double lo, double hi);

/**
 * C = alpha * op(A) * op(B) + beta * C.
 *
 * # Safety
 * `s` must be a live session.
 */
enum GmStatus gm_gemm(struct GmSession *s,
                      uint64_t a,
                      uint64_t b,
                      uint64_t c,
                      double alpha,
                      double beta,
                      bool trans_a,
                      bool trans_b);

/**
 * Row-wise softmax in place.
 *
 * # Safety
 * `s` must be a live session.
 */
enum GmStatus gm_softmax_rows(struct GmSession *s, uint64_t m);

/**
 * Replicates `m` to every worker and waits.
 *
 * # Safety
 * `s` must be a live session.
 */
enum GmStatus gm_replicate(struct GmSession *s, uint64_t m);

/**
 * # Safety
 * `s` must be a live session; `path` a NUL-terminated string.
 */
enum GmStatus gm_checkpoint(struct GmSession *s, const char *path);

/**
 * Restores a checkpoint onto `workers` fresh workers.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for one write.
 */
enum GmStatus gm_session_restore(const char *path, uint32_t workers, struct GmSession **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRIDMATH_H */
