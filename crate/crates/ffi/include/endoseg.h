#ifndef ENDOSEG_H
#define ENDOSEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Region class codes used across the ABI.
 */
#define ENDOSEG_CLASS_NONE 0

#define ENDOSEG_CLASS_CELL 1

#define ENDOSEG_CLASS_GUTTA 2

/**
 * Result codes. Zero is success; all failures are negative.
 */
typedef enum EndosegStatus {
  ENDOSEG_STATUS_OK = 0,
  /**
   * The edit was valid but changed nothing (e.g. a cut that does not
   * disconnect its region).
   */
  ENDOSEG_STATUS_UNCHANGED = 1,
  ENDOSEG_STATUS_NULL_POINTER = -1,
  ENDOSEG_STATUS_INVALID_ARGUMENT = -2,
  ENDOSEG_STATUS_IO = -3,
  ENDOSEG_STATUS_FORMAT = -4,
  ENDOSEG_STATUS_WEIGHTS = -5,
  ENDOSEG_STATUS_UNKNOWN_LABEL = -6,
  ENDOSEG_STATUS_NOT_ADJACENT = -7,
  ENDOSEG_STATUS_CROSS_CLASS_MERGE = -8,
  ENDOSEG_STATUS_EMPTY_HISTORY = -9,
  ENDOSEG_STATUS_INVALID_MASKS = -10,
  ENDOSEG_STATUS_PANIC = -98,
  ENDOSEG_STATUS_OTHER = -99,
} EndosegStatus;

/**
 * Labeled regions with their classes.
 */
typedef struct EndosegLabelMap EndosegLabelMap;

/**
 * Trained network.
 */
typedef struct EndosegModel EndosegModel;

/**
 * Annotation editing session.
 */
typedef struct EndosegSession EndosegSession;

/**
 * Morphometry summary. Undefined parameters are NaN.
 */
typedef struct EndosegReport {
  double cd;
  double mca;
  double hex_pct;
  double cv_pct;
  double gar_pct;
  uint32_t n_cells;
  uint32_t n_guttae;
  double analyzed_area_mm2;
} EndosegReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated
 * to `cap` bytes) into `buf`. Returns the full message length without the
 * terminator; 0 when there is none.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t endoseg_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *endoseg_version(void);

/**
 * Loads a weights file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EndosegStatus endoseg_model_load(const char *path, struct EndosegModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`endoseg_model_load`], not yet freed.
 */
void endoseg_model_free(struct EndosegModel *model);

/**
 * Segments a row-major `width`×`height` image.
 *
 * # Safety
 * `image` must hold `width*height` floats; `out` must be writable.
 */
enum EndosegStatus endoseg_segment(const struct EndosegModel *model,
                                   const float *image,
                                   size_t width,
                                   size_t height,
                                   struct EndosegLabelMap **out);

/**
 * Encodes binary masks (nonzero = foreground) as a signed distance map
 * written to `out_map` (`width*height` floats).
 *
 * # Safety
 * `cells`, `guttae` must hold `width*height` bytes and `out_map` as many
 * floats.
 */
enum EndosegStatus endoseg_encode_masks(const uint8_t *cells,
                                        const uint8_t *guttae,
                                        size_t width,
                                        size_t height,
                                        float *out_map);

/**
 * Decodes a signed distance map into regions by marker watershed.
 *
 * # Safety
 * `map` must hold `width*height` floats; `out` must be writable.
 */
enum EndosegStatus endoseg_decode_distance_map(const float *map,
                                               size_t width,
                                               size_t height,
                                               struct EndosegLabelMap **out);

/**
 * # Safety
 * `map` must be null or a live label map handle.
 */
void endoseg_labelmap_free(struct EndosegLabelMap *map);

/**
 * Number of regions; 0 for a null handle.
 *
 * # Safety
 * `map` must be null or a live label map handle.
 */
size_t endoseg_labelmap_region_count(const struct EndosegLabelMap *map);

/**
 * Copies the label grid (row-major, 0 = boundary/background) into `out`,
 * which must hold `len >= width*height` values.
 *
 * # Safety
 * `out` must point to `len` writable `u32`s.
 */
enum EndosegStatus endoseg_labelmap_labels(const struct EndosegLabelMap *map,
                                           uint32_t *out,
                                           size_t len);

/**
 * Class code of `label` (`ENDOSEG_CLASS_NONE` when absent).
 *
 * # Safety
 * `map` must be null or a live label map handle.
 */
uint8_t endoseg_labelmap_class(const struct EndosegLabelMap *map, uint32_t label);

/**
 * Morphometry over the whole map at the given pixel size.
 *
 * # Safety
 * `out` must be writable.
 */
enum EndosegStatus endoseg_labelmap_report(const struct EndosegLabelMap *map,
                                           double um_per_px_x,
                                           double um_per_px_y,
                                           struct EndosegReport *out);

/**
 * Opens an editing session on an image file; an initial segmentation in
 * the file pre-populates the regions.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EndosegStatus endoseg_session_open(const char *path, struct EndosegSession **out);

/**
 * # Safety
 * `session` must be null or a live session handle.
 */
void endoseg_session_free(struct EndosegSession *session);

/**
 * Cuts `label` along a polyline of `n_points` interleaved `x, y` pairs.
 * Returns `Unchanged` when the cut does not disconnect the region.
 *
 * # Safety
 * `xy` must hold `2*n_points` values.
 */
enum EndosegStatus endoseg_session_split(struct EndosegSession *session,
                                         uint32_t label,
                                         const int64_t *xy,
                                         size_t n_points);

/**
 * Merges `b` into `a`; `force` allows different classes.
 *
 * # Safety
 * `session` must be a live session handle.
 */
enum EndosegStatus endoseg_session_merge(struct EndosegSession *session,
                                         uint32_t a,
                                         uint32_t b,
                                         bool force);

/**
 * # Safety
 * `session` must be a live session handle.
 */
enum EndosegStatus endoseg_session_set_class(struct EndosegSession *session,
                                             uint32_t label,
                                             uint8_t class_code);

/**
 * Paints a brush stroke; `label` 0 creates new regions of `class_code`.
 *
 * # Safety
 * `xy` must hold `2*n_points` values.
 */
enum EndosegStatus endoseg_session_draw(struct EndosegSession *session,
                                        uint8_t class_code,
                                        uint32_t label,
                                        const int64_t *xy,
                                        size_t n_points,
                                        uint32_t radius);

/**
 * # Safety
 * `xy` must hold `2*n_points` values.
 */
enum EndosegStatus endoseg_session_erase(struct EndosegSession *session,
                                         const int64_t *xy,
                                         size_t n_points,
                                         uint32_t radius);

/**
 * # Safety
 * `session` must be a live session handle.
 */
enum EndosegStatus endoseg_session_undo(struct EndosegSession *session);

/**
 * Copies the current regions into a new label map handle.
 *
 * # Safety
 * `out` must be writable.
 */
enum EndosegStatus endoseg_session_labelmap(const struct EndosegSession *session,
                                            struct EndosegLabelMap **out);

/**
 * Live morphometry of the session.
 *
 * # Safety
 * `out` must be writable.
 */
enum EndosegStatus endoseg_session_report(const struct EndosegSession *session,
                                          struct EndosegReport *out);

/**
 * Writes the three-page export; an existing file is kept as `<path>.bak`.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum EndosegStatus endoseg_session_export(struct EndosegSession *session, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENDOSEG_H */
