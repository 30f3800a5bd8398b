/* C interface to the gscodec Gaussian-splat scene codec. */

#ifndef GSCODEC_H
#define GSCODEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible API call.
 */
typedef enum GscStatus {
  GSC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  GSC_STATUS_NULL_ARGUMENT = 1,
  /**
   * A path, string, or config value was malformed.
   */
  GSC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * File IO failed.
   */
  GSC_STATUS_IO = 3,
  /**
   * The container could not be parsed.
   */
  GSC_STATUS_DECODE = 4,
  /**
   * A training stage failed.
   */
  GSC_STATUS_TRAIN = 5,
  /**
   * Unexpected internal failure (a bug; details via `gsc_last_error`).
   */
  GSC_STATUS_INTERNAL = 6,
} GscStatus;

/**
 * An opened (decoded) scene.
 */
typedef struct GscScene GscScene;

/**
 * Compression settings. Zero-initialization is NOT a valid default; call
 * [`gsc_config_default`] first and then override fields.
 */
typedef struct GscConfig {
  /**
   * Weight of the mask sparsity loss.
   */
  double lambda_mask;
  /**
   * Hard-mask threshold on the soft mask at prune time.
   */
  double epsilon;
  /**
   * 0 = opacity only, 1 = scale only, 2 = both.
   */
  uint8_t mask_mode;
  /**
   * Apply post-processing (pruning + quantization + entropy coding).
   */
  bool post_process;
  /**
   * Skip mask training and keep every Gaussian.
   */
  bool skip_mask;
  /**
   * Codes per residual-VQ stage.
   */
  uint32_t codebook_size;
  /**
   * Residual-VQ stages.
   */
  uint32_t stages;
  /**
   * log2 of the per-level hash table cap.
   */
  uint32_t hash_log2;
  uint64_t iters_mask;
  uint64_t iters_field;
  uint64_t iters_rvq;
  uint64_t seed;
} GscConfig;

/**
 * A pinhole camera. `rotation` is the row-major world-to-camera matrix;
 * `focal` and `principal` are in pixels.
 */
typedef struct GscCamera {
  double rotation[9];
  double center[3];
  double focal[2];
  double principal[2];
  uint32_t width;
  uint32_t height;
} GscCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Fill `out` with the default compression settings.
 *
 * # Safety
 * `out` must be valid for writes of one `GscConfig`.
 */
enum GscStatus gsc_config_default(struct GscConfig *out);

/**
 * Compress a PLY scene into a `.cgs` container file.
 * `cameras_json` may be null (mask training is then skipped); `config` may
 * be null for defaults.
 *
 * # Safety
 * All non-null pointers must satisfy the conventions above.
 */
enum GscStatus gsc_compress_file(const char *input_ply,
                                 const char *cameras_json,
                                 const char *output_cgs,
                                 const struct GscConfig *config);

/**
 * Decode a container and write an interop PLY with colors baked at
 * `view_dir` (a length-3 array; null means +z).
 *
 * # Safety
 * All non-null pointers must satisfy the conventions above.
 */
enum GscStatus gsc_decompress_file(const char *input_cgs,
                                   const char *output_ply,
                                   const double *view_dir);

/**
 * Open a container file as a scene handle. On success `*out` owns the scene.
 *
 * # Safety
 * `path` must be a valid string pointer; `out` must be valid for writes.
 */
enum GscStatus gsc_scene_open(const char *path, struct GscScene **out);

/**
 * Release a scene handle. Null is a no-op.
 *
 * # Safety
 * `scene` must be null or a pointer returned by [`gsc_scene_open`] that has
 * not been freed.
 */
void gsc_scene_free(struct GscScene *scene);

/**
 * Number of Gaussians in the scene; 0 for null.
 *
 * # Safety
 * `scene` must be null or a live handle.
 */
uint64_t gsc_scene_gaussian_count(const struct GscScene *scene);

/**
 * Render the scene at `camera` into `out_rgb`, a caller-allocated buffer of
 * `width * height * 3` floats (row-major RGB in [0, 1]).
 *
 * # Safety
 * `scene` and `camera` must be live; `out_rgb` must be valid for
 * `width * height * 3` float writes.
 */
enum GscStatus gsc_scene_render(const struct GscScene *scene,
                                const struct GscCamera *camera,
                                float *out_rgb);

/**
 * Storage breakdown of a container file as a JSON string. The caller owns
 * `*out` and must release it with [`gsc_string_free`].
 *
 * # Safety
 * `path` must be a valid string pointer; `out` must be valid for writes.
 */
enum GscStatus gsc_stats_json(const char *path, char **out);

/**
 * Release a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a pointer returned by this library that has not been
 * freed.
 */
void gsc_string_free(char *s);

/**
 * Message for the last failure on this thread (empty if none). Valid until
 * the next failing call on the same thread.
 */
const char *gsc_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSCODEC_H */
