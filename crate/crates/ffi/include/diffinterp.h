#ifndef DIFFINTERP_H
#define DIFFINTERP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DiStatus {
  DI_STATUS_OK = 0,
  DI_STATUS_NULL_POINTER = 1,
  DI_STATUS_INVALID_ARGUMENT = 2,
  DI_STATUS_INVALID_CONFIG = 3,
  DI_STATUS_BACKEND = 4,
  DI_STATUS_IO = 5,
  DI_STATUS_NUMERIC = 6,
  DI_STATUS_PANIC = 7,
} DiStatus;

typedef struct DiBackend DiBackend;

typedef struct DiImage DiImage;

typedef struct DiSequence DiSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * success. Valid until the next call on the same thread.
 */
const char *di_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *di_version(void);

/**
 * Spherical interpolation of two `len`-vectors into `out` (`len` doubles).
 *
 * # Safety
 * `a`, `b` and `out` must each point to `len` doubles.
 */
enum DiStatus di_slerp(const double *a, const double *b, size_t len, double u, double *out);

/**
 * Timestep for frame `i` of a sequence with `n` intervals.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DiStatus di_frame_schedule(size_t i, size_t n, uint32_t t_min, uint32_t t_max, uint32_t *out);

/**
 * Fréchet distance between two row-major feature matrices of width `dim`.
 *
 * # Safety
 * `a` must hold `rows_a * dim` doubles, `b` must hold `rows_b * dim`.
 */
enum DiStatus di_fid(const double *a,
                     size_t rows_a,
                     const double *b,
                     size_t rows_b,
                     size_t dim,
                     double *out);

/**
 * Total path length through `rows` consecutive feature vectors.
 *
 * # Safety
 * `seq` must hold `rows * dim` doubles.
 */
enum DiStatus di_ppl(const double *seq, size_t rows, size_t dim, double *out);

/**
 * Opens a backend by name (`"toy"` or `"process"`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DiStatus di_backend_open(const char *name, struct DiBackend **out);

/**
 * Toy backend with a custom working size and prior width.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DiStatus di_toy_backend_new(uint32_t width,
                                 uint32_t height,
                                 double prior_std,
                                 struct DiBackend **out);

/**
 * # Safety
 * `backend` must come from this library and not be used afterwards.
 */
void di_backend_free(struct DiBackend *backend);

/**
 * Image from interleaved RGB floats, `width * height * 3` of them.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` floats and `out` must be valid.
 */
enum DiStatus di_image_new(uint32_t width, uint32_t height, const float *rgb, struct DiImage **out);

/**
 * Loads any format the `image` crate decodes.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum DiStatus di_image_load(const char *path, struct DiImage **out);

/**
 * # Safety
 * `image` must be a live handle and `path` NUL-terminated.
 */
enum DiStatus di_image_save_png(const struct DiImage *image, const char *path);

/**
 * Writes the size to `width` and `height`, and a borrowed pointer to the
 * `width * height * 3` floats to `data`. The pointer lives as long as the
 * image.
 *
 * # Safety
 * `image` must be a live handle; the out pointers must be valid.
 */
enum DiStatus di_image_data(const struct DiImage *image,
                            uint32_t *width,
                            uint32_t *height,
                            const float **data);

/**
 * # Safety
 * `image` must come from this library and not be used afterwards. Frames
 * borrowed from a sequence must not be passed here.
 */
void di_image_free(struct DiImage *image);

/**
 * Runs one interpolation scheme between `a` and `b`.
 *
 * `config_json` holds generation settings as a JSON object; missing keys
 * take their defaults and null means all defaults. `prompt` and
 * `negative_prompt` may be null for empty prompts.
 *
 * # Safety
 * Handles must be live, strings NUL-terminated or null, `out` valid.
 */
enum DiStatus di_run(const struct DiBackend *backend,
                     const struct DiImage *a,
                     const struct DiImage *b,
                     const char *config_json,
                     const char *prompt,
                     const char *negative_prompt,
                     struct DiSequence **out);

/**
 * Number of frames, endpoints included. Zero for a null handle.
 *
 * # Safety
 * `seq` must be a live handle or null.
 */
size_t di_sequence_len(const struct DiSequence *seq);

/**
 * Borrowed frame `index`, or null when out of range. Owned by the
 * sequence; do not free.
 *
 * # Safety
 * `seq` must be a live handle or null.
 */
const struct DiImage *di_sequence_frame(const struct DiSequence *seq, size_t index);

/**
 * # Safety
 * `seq` must come from this library and not be used afterwards.
 */
void di_sequence_free(struct DiSequence *seq);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFINTERP_H */
