#ifndef SGSEQ_H
#define SGSEQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SGSEQ_PROTOCOL_SGDET 0

#define SGSEQ_PROTOCOL_SGCLS 1

#define SGSEQ_PROTOCOL_PCLS 2

typedef enum SgseqStatus {
  SGSEQ_STATUS_OK = 0,
  SGSEQ_STATUS_NULL_POINTER = 1,
  SGSEQ_STATUS_INVALID_UTF8 = 2,
  /**
   * File could not be read or parsed.
   */
  SGSEQ_STATUS_IO = 3,
  /**
   * An argument is out of range or inconsistent.
   */
  SGSEQ_STATUS_INVALID_ARGUMENT = 4,
  /**
   * Output buffer too small; the required length was still written.
   */
  SGSEQ_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * The computation ran but its check failed (gradcheck).
   */
  SGSEQ_STATUS_CHECK_FAILED = 6,
  SGSEQ_STATUS_PANIC = 7,
} SgseqStatus;

/**
 * Evaluation result.
 */
typedef struct SgseqEvalReport SgseqEvalReport;

/**
 * Loaded vocabulary.
 */
typedef struct SgseqVocab SgseqVocab;

/**
 * Normalized corners, every coordinate in `[0, 1]`.
 */
typedef struct SgseqBox {
  double x1;
  double y1;
  double x2;
  double y2;
} SgseqBox;

typedef struct SgseqParseStats {
  size_t n_triplets;
  size_t n_unique_triplets;
  size_t n_rel_tokens;
} SgseqParseStats;

/**
 * Half-open token ranges of one parsed triplet; each range ends after its
 * delimiter token.
 */
typedef struct SgseqSpan {
  size_t subject_start;
  size_t subject_end;
  size_t predicate_start;
  size_t predicate_end;
  size_t object_start;
  size_t object_end;
} SgseqSpan;

typedef struct SgseqGradcheckResult {
  double loss_max_rel_error;
  double network_max_rel_error;
  size_t network_parameters;
} SgseqGradcheckResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *sgseq_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *sgseq_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer obtained from this library.
 */
void sgseq_string_free(char *s);

/**
 * # Safety
 * Pointers must be null or valid for reads (boxes) and writes (`out`).
 */
enum SgseqStatus sgseq_iou(const struct SgseqBox *a, const struct SgseqBox *b, double *out);

/**
 * # Safety
 * Pointers must be null or valid for reads (boxes) and writes (`out`).
 */
enum SgseqStatus sgseq_giou(const struct SgseqBox *a, const struct SgseqBox *b, double *out);

/**
 * Loads `vocab.txt`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SgseqStatus sgseq_vocab_load(const char *path, struct SgseqVocab **out);

/**
 * # Safety
 * `v` must be null or a handle from [`sgseq_vocab_load`], freed once.
 */
void sgseq_vocab_free(struct SgseqVocab *v);

/**
 * # Safety
 * `v` must be a live vocabulary handle; `out` must be writable.
 */
enum SgseqStatus sgseq_vocab_size(const struct SgseqVocab *v, size_t *out);

/**
 * Tokenizes `text` into `ids` (capacity `cap`). `len` receives the token
 * count; when it exceeds `cap` nothing is written and
 * `BufferTooSmall` is returned.
 *
 * # Safety
 * `ids` must be valid for `cap` writes (may be null when `cap` is 0).
 */
enum SgseqStatus sgseq_vocab_tokenize(const struct SgseqVocab *v,
                                      const char *text,
                                      uint32_t *ids,
                                      size_t cap,
                                      size_t *len);

/**
 * Parses a token sequence. Statistics are always written; spans go to
 * `spans` (capacity `cap`), with `n_spans` receiving the full count.
 *
 * # Safety
 * `tokens` must be valid for `n` reads; `spans` for `cap` writes.
 */
enum SgseqStatus sgseq_parse(const struct SgseqVocab *v,
                             const uint32_t *tokens,
                             size_t n,
                             struct SgseqParseStats *stats,
                             struct SgseqSpan *spans,
                             size_t cap,
                             size_t *n_spans);

/**
 * Evaluates predicted graphs against ground truth at K = 20, 50, 100.
 * `seen_path` may be null, in which case zero-shot recall is undefined.
 *
 * # Safety
 * Paths must be NUL-terminated strings (or null for `seen_path`); `out`
 * must be writable.
 */
enum SgseqStatus sgseq_evaluate_files(const char *categories_path,
                                      const char *pred_path,
                                      const char *gt_path,
                                      const char *seen_path,
                                      int32_t protocol,
                                      struct SgseqEvalReport **out);

/**
 * Value of one report key (e.g. `"R@50"`, `"zR@100"`) as a double.
 * Undefined metrics give `InvalidArgument`.
 *
 * # Safety
 * `r` must be a live report handle; `key` a NUL-terminated string.
 */
enum SgseqStatus sgseq_eval_report_value(const struct SgseqEvalReport *r,
                                         const char *key,
                                         double *out);

/**
 * All report values as `key = value` lines with exact ratios. Release with
 * [`sgseq_string_free`].
 *
 * # Safety
 * `r` must be a live report handle; `out` must be writable.
 */
enum SgseqStatus sgseq_eval_report_text(const struct SgseqEvalReport *r, char **out);

/**
 * # Safety
 * `r` must be null or a handle from [`sgseq_evaluate_files`], freed once.
 */
void sgseq_eval_report_free(struct SgseqEvalReport *r);

/**
 * Runs the finite-difference gradient check with default dimensions and
 * `layers` attention layers. Returns `CheckFailed` when a tolerance is
 * exceeded; `out` is filled either way.
 *
 * # Safety
 * `out` must be writable.
 */
enum SgseqStatus sgseq_gradcheck(uint64_t seed, size_t layers, struct SgseqGradcheckResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGSEQ_H */
