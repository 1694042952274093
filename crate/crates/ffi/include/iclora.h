#ifndef ICLORA_H
#define ICLORA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IcloraStatus {
  ICLORA_STATUS_OK = 0,
  ICLORA_STATUS_NULL_POINTER = 1,
  ICLORA_STATUS_INVALID_ARGUMENT = 2,
  ICLORA_STATUS_IO = 3,
  ICLORA_STATUS_FORMAT = 4,
  ICLORA_STATUS_SHAPE = 5,
  ICLORA_STATUS_NUMERIC = 6,
  ICLORA_STATUS_BUFFER_TOO_SMALL = 7,
  ICLORA_STATUS_PANIC = 8,
} IcloraStatus;

/**
 * A composed canvas with its panel layout.
 */
typedef struct IcloraImage IcloraImage;

/**
 * A loaded base model with an optional adapter.
 */
typedef struct IcloraModel IcloraModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *iclora_last_error(void);

/**
 * Library version as a static string.
 */
const char *iclora_version(void);

/**
 * Loads a base checkpoint and, if `lora_path` is not null, an adapter.
 */
enum IcloraStatus iclora_model_load(const char *base_path,
                                    const char *lora_path,
                                    struct IcloraModel **out);

void iclora_model_free(struct IcloraModel *model);

/**
 * Samples one image set. `prompt_json` may be null for the unconditional
 * prompt; `layout` is e.g. "2x2".
 */
enum IcloraStatus iclora_generate(const struct IcloraModel *model,
                                  const char *prompt_json,
                                  const char *layout,
                                  uint64_t seed,
                                  uint32_t steps,
                                  double guidance,
                                  struct IcloraImage **out);

/**
 * Regenerates the panels named in `mask` (e.g. "TR,BR") of `reference`.
 */
enum IcloraStatus iclora_inpaint(const struct IcloraModel *model,
                                 const char *prompt_json,
                                 const struct IcloraImage *reference,
                                 const char *mask,
                                 double strength,
                                 uint64_t seed,
                                 uint32_t steps,
                                 double guidance,
                                 struct IcloraImage **out);

/**
 * Loads a canvas PNG to be read with `layout`.
 */
enum IcloraStatus iclora_image_load(const char *path, const char *layout, struct IcloraImage **out);

void iclora_image_free(struct IcloraImage *image);

/**
 * Canvas height in pixels, or 0 for a null handle.
 */
size_t iclora_image_height(const struct IcloraImage *image);

size_t iclora_image_width(const struct IcloraImage *image);

size_t iclora_image_panel_count(const struct IcloraImage *image);

/**
 * Copies interleaved 8-bit RGB rows into `buf`, which must hold
 * `height * width * 3` bytes.
 */
enum IcloraStatus iclora_image_rgb8(const struct IcloraImage *image, uint8_t *buf, size_t len);

/**
 * Writes the whole canvas to one PNG file.
 */
enum IcloraStatus iclora_image_save_png(const struct IcloraImage *image, const char *path);

/**
 * Writes `canvas.png`, one `panel_<MARKER>.png` per panel and `set.json`
 * into `dir`.
 */
enum IcloraStatus iclora_image_save_set(const struct IcloraImage *image, const char *dir);

/**
 * Tokenizes a prompt program for `layout`. Writes up to `capacity` ids and
 * the full sequence length to `out_len`; fails with `BufferTooSmall` when
 * the sequence does not fit.
 */
enum IcloraStatus iclora_tokenize(const char *prompt_json,
                                  const char *layout,
                                  uint32_t *out_ids,
                                  size_t capacity,
                                  size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICLORA_H */
