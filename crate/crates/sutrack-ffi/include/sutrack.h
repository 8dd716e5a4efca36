/* C interface for the sutrack library. Regenerated by the build script. */

#ifndef SUTRACK_H
#define SUTRACK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome; every API function returns one.
 */
typedef enum {
  SUTRACK_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SUTRACK_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments were present but invalid (shape, range, JSON, task).
   */
  SUTRACK_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The checkpoint could not be read or did not match the config.
   */
  SUTRACK_STATUS_BAD_CHECKPOINT = 3,
  /**
   * Operation called out of order (e.g. step before init).
   */
  SUTRACK_STATUS_BAD_STATE = 4,
  /**
   * Unexpected internal failure; details via sutrack_last_error.
   */
  SUTRACK_STATUS_INTERNAL = 5,
} SutrackStatus;

/**
 * Task labels matching the five training domains.
 */
typedef enum {
  SUTRACK_TASK_RGB = 0,
  SUTRACK_TASK_RGBD = 1,
  SUTRACK_TASK_RGBT = 2,
  SUTRACK_TASK_RGBE = 3,
  SUTRACK_TASK_RGBL = 4,
} SutrackTask;

/**
 * Opaque tracker handle.
 */
typedef struct SutrackTracker SutrackTracker;

/**
 * One input frame. `rgb` points at width*height*3 floats (row-major, HWC).
 * `aux` is null for RGB/RGBL tasks and another width*height*3 buffer
 * otherwise. `language` is an optional UTF-8 description (RGBL only).
 */
typedef struct {
  uint32_t width;
  uint32_t height;
  const float *rgb;
  const float *aux;
  SutrackTask task;
  const char *language;
} SutrackFrame;

/**
 * Axis-aligned box in frame pixels, corners (x0,y0) top-left inclusive.
 */
typedef struct {
  double x0;
  double y0;
  double x1;
  double y1;
} SutrackBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message (UTF-8, not null-terminated unless space
 * allows) into `buf` and returns its full length in bytes. A zero return
 * means no error has been recorded on this thread.
 */
size_t sutrack_last_error(char *buf, size_t cap);

/**
 * Library version as a static null-terminated string.
 */
const char *sutrack_version(void);

/**
 * Creates a tracker from a checkpoint and an optional JSON config (null for
 * defaults). The config must describe the checkpoint's architecture. On
 * success `*out` owns the tracker; release it with sutrack_tracker_free.
 *
 * # Safety
 * `ckpt_path` must be a valid null-terminated string; `config_json` null or
 * the same; `out` a valid pointer.
 */
SutrackStatus sutrack_tracker_create(const char *ckpt_path,
                                     const char *config_json,
                                     SutrackTracker **out);

/**
 * Initializes tracking from the first frame and its target box. May be
 * called again to restart on a new sequence.
 *
 * # Safety
 * `tracker` must come from sutrack_tracker_create; `frame` must point at a
 * valid frame whose buffers match its stated size.
 */
SutrackStatus sutrack_tracker_init(SutrackTracker *tracker,
                                   const SutrackFrame *frame,
                                   SutrackBox target);

/**
 * Tracks the target into the next frame, writing the predicted box and its
 * confidence. Requires a prior successful init.
 *
 * # Safety
 * Pointer requirements as in sutrack_tracker_init; `out_box` and
 * `out_confidence` must be valid or null (null skips that output).
 */
SutrackStatus sutrack_tracker_step(SutrackTracker *tracker,
                                   const SutrackFrame *frame,
                                   SutrackBox *out_box,
                                   double *out_confidence);

/**
 * Releases a tracker. Null is a no-op.
 *
 * # Safety
 * `tracker` must be null or a pointer from sutrack_tracker_create that has
 * not been freed yet.
 */
void sutrack_tracker_free(SutrackTracker *tracker);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUTRACK_H */
