#ifndef SYNCVSR_H
#define SYNCVSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SvStatus {
  SV_STATUS_OK = 0,
  SV_STATUS_NULL_POINTER = 1,
  SV_STATUS_INVALID_ARGUMENT = 2,
  SV_STATUS_IO = 3,
  SV_STATUS_CORRUPT = 4,
  SV_STATUS_VERSION_MISMATCH = 5,
  SV_STATUS_FINGERPRINT_MISMATCH = 6,
  SV_STATUS_INFEASIBLE = 7,
  SV_STATUS_OUT_OF_RANGE = 8,
  SV_STATUS_BUFFER_TOO_SMALL = 9,
  SV_STATUS_PANIC = 10,
} SvStatus;

typedef struct SvCodebook SvCodebook;

typedef struct SvDataset SvDataset;

typedef struct SvModel SvModel;

typedef struct SvWorld SvWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sv_version(void);

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated
 * to `cap`) and returns the full message length excluding the NUL.
 * Returns 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t sv_last_error_message(char *buf, size_t cap);

/**
 * Loads the world written next to the splits in `data_dir`.
 *
 * # Safety
 * `data_dir` must be a NUL-terminated string; `out` must be writable.
 */
enum SvStatus sv_world_load(const char *data_dir, struct SvWorld **out);

/**
 * # Safety
 * `world` must come from [`sv_world_load`] and not be used afterwards.
 */
void sv_world_free(struct SvWorld *world);

/**
 * # Safety
 * `world` must be a live handle; `out` must be writable.
 */
enum SvStatus sv_world_num_words(const struct SvWorld *world, size_t *out);

/**
 * Copies the NUL-terminated world fingerprint into `buf`.
 *
 * # Safety
 * `world` must be a live handle; `buf` must be valid for `cap` bytes.
 */
enum SvStatus sv_world_fingerprint(const struct SvWorld *world,
                                   char *buf,
                                   size_t cap,
                                   size_t *len_out);

/**
 * Loads one split directory. A non-null `world` enforces its fingerprint.
 *
 * # Safety
 * `split_dir` must be a NUL-terminated string; `world` null or live;
 * `out` writable.
 */
enum SvStatus sv_dataset_load(const char *split_dir,
                              const struct SvWorld *world,
                              struct SvDataset **out);

/**
 * # Safety
 * `dataset` must come from [`sv_dataset_load`] and not be used afterwards.
 */
void sv_dataset_free(struct SvDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle; `out` writable.
 */
enum SvStatus sv_dataset_len(const struct SvDataset *dataset, size_t *out);

/**
 * Frame count and feature width of sample `index`.
 *
 * # Safety
 * `dataset` must be a live handle; outputs writable.
 */
enum SvStatus sv_dataset_sample_shape(const struct SvDataset *dataset,
                                      size_t index,
                                      size_t *frames_out,
                                      size_t *dim_out);

/**
 * Copies the row-major `frames × dim` visual features of sample `index`.
 *
 * # Safety
 * `dataset` must be a live handle; `buf` valid for `cap` floats.
 */
enum SvStatus sv_dataset_sample_frames(const struct SvDataset *dataset,
                                       size_t index,
                                       float *buf,
                                       size_t cap,
                                       size_t *len_out);

/**
 * Copies the label codes of sample `index`: one word id in word mode, the
 * grapheme sequence in sentence mode.
 *
 * # Safety
 * `dataset` must be a live handle; `buf` valid for `cap` elements.
 */
enum SvStatus sv_dataset_sample_label(const struct SvDataset *dataset,
                                      size_t index,
                                      uint16_t *buf,
                                      size_t cap,
                                      size_t *len_out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum SvStatus sv_codebook_load(const char *path, struct SvCodebook **out);

/**
 * # Safety
 * `codebook` must come from [`sv_codebook_load`] and not be used afterwards.
 */
void sv_codebook_free(struct SvCodebook *codebook);

/**
 * # Safety
 * `codebook` must be a live handle; outputs writable.
 */
enum SvStatus sv_codebook_shape(const struct SvCodebook *codebook,
                                size_t *size_out,
                                size_t *dim_out);

/**
 * Nearest-centroid ids for `rows` row-major feature vectors of width `dim`.
 *
 * # Safety
 * `features` valid for `rows * dim` doubles; `tokens_out` for `rows` ids.
 */
enum SvStatus sv_codebook_quantize(const struct SvCodebook *codebook,
                                   const double *features,
                                   size_t rows,
                                   size_t dim,
                                   uint16_t *tokens_out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum SvStatus sv_model_load(const char *path, struct SvModel **out);

/**
 * # Safety
 * `model` must come from [`sv_model_load`] and not be used afterwards.
 */
void sv_model_free(struct SvModel *model);

/**
 * Word-classifier prediction for sample `index`.
 *
 * # Safety
 * Handles live; `word_out` writable.
 */
enum SvStatus sv_model_predict_word(const struct SvModel *model,
                                    const struct SvDataset *dataset,
                                    size_t index,
                                    size_t *word_out);

/**
 * Greedy decoder transcript (grapheme ids, no BOS/EOS) for sample `index`.
 *
 * # Safety
 * Handles live; `buf` valid for `cap` elements.
 */
enum SvStatus sv_model_transcribe(const struct SvModel *model,
                                  const struct SvDataset *dataset,
                                  size_t index,
                                  uint16_t *buf,
                                  size_t cap,
                                  size_t *len_out);

/**
 * Edit distance between two id sequences.
 *
 * # Safety
 * `a` valid for `na`, `b` for `nb` elements.
 */
enum SvStatus sv_levenshtein(const uint32_t *a,
                             size_t na,
                             const uint32_t *b,
                             size_t nb,
                             size_t *out);

/**
 * Word error rate of `hyp` against a non-empty `reference`.
 *
 * # Safety
 * `hyp` valid for `nh`, `reference` for `nr` elements.
 */
enum SvStatus sv_wer(const uint32_t *hyp,
                     size_t nh,
                     const uint32_t *reference,
                     size_t nr,
                     double *out);

/**
 * CTC negative log-likelihood of `target` under `frames × classes` logits
 * (blank is the last class).
 *
 * # Safety
 * `logits` valid for `frames * classes`, `target` for `target_len` elements.
 */
enum SvStatus sv_ctc_loss(const double *logits,
                          size_t frames,
                          size_t classes,
                          const uint32_t *target,
                          size_t target_len,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYNCVSR_H */
