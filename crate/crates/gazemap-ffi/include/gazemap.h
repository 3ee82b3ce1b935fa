/* C interface to the gazemap toolchain. Regenerated by the build script. */

#ifndef GAZEMAP_H
#define GAZEMAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a gazemap call.
 */
typedef enum GmStatus {
  GM_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  GM_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  GM_STATUS_INVALID_UTF8 = 2,
  /**
   * An argument value was out of range or malformed.
   */
  GM_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Reading or writing a file failed.
   */
  GM_STATUS_IO = 4,
  /**
   * Input data did not parse (OSM, CSV, JSON, PGM, tensor).
   */
  GM_STATUS_PARSE = 5,
  /**
   * Map matching failed (empty trace, no candidates, broken route).
   */
  GM_STATUS_MATCH = 6,
  /**
   * A pipeline stage failed; see the error message for the stage.
   */
  GM_STATUS_PIPELINE = 7,
  /**
   * Unexpected internal failure.
   */
  GM_STATUS_INTERNAL = 8,
} GmStatus;

/**
 * Opaque drivable street graph.
 */
typedef struct GmGraph GmGraph;

/**
 * Opaque rasterized street map with its geo transform.
 */
typedef struct GmRaster GmRaster;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the most recent failure on the calling thread. Borrowed;
 * valid until the next failing gazemap call on this thread. Never NULL.
 */
const char *gm_last_error_message(void);

/**
 * Library version, static NUL-terminated string.
 */
const char *gm_version(void);

/**
 * Parse an OSM XML file into a street graph. The caller owns `*out` and
 * frees it with `gm_graph_free`.
 */
enum GmStatus gm_graph_from_osm_file(const char *path, struct GmGraph **out);

/**
 * Load a street graph from its JSON serialization.
 */
enum GmStatus gm_graph_from_json_file(const char *path, struct GmGraph **out);

/**
 * Write a street graph as JSON.
 */
enum GmStatus gm_graph_save_json(const struct GmGraph *graph, const char *path);

/**
 * Node and edge counts of a graph. Either output may be NULL.
 */
enum GmStatus gm_graph_counts(const struct GmGraph *graph, size_t *out_nodes, size_t *out_edges);

void gm_graph_free(struct GmGraph *graph);

/**
 * Rasterize every edge of a graph. The caller owns `*out` and frees it
 * with `gm_raster_free`.
 */
enum GmStatus gm_raster_from_graph(const struct GmGraph *graph,
                                   double m_per_px,
                                   double line_width_px,
                                   struct GmRaster **out);

/**
 * Load a raster from a PGM written by `gm_raster_save_pgm` (the JSON geo
 * sidecar must sit next to it).
 */
enum GmStatus gm_raster_load_pgm(const char *path, struct GmRaster **out);

/**
 * Write the raster as PGM plus its JSON geo sidecar.
 */
enum GmStatus gm_raster_save_pgm(const struct GmRaster *raster, const char *path);

/**
 * Raster dimensions in pixels. Either output may be NULL.
 */
enum GmStatus gm_raster_size(const struct GmRaster *raster, size_t *out_width, size_t *out_height);

void gm_raster_free(struct GmRaster *raster);

/**
 * HMM-match a GPS trace CSV (`t,lat,lon` header) against the graph and
 * write per-frame snapped fixes as CSV. `n_frames == 0` derives the frame
 * count from the trace span and `frame_rate_hz`.
 */
enum GmStatus gm_match_trace_file(const struct GmGraph *graph,
                                  const char *trace_csv,
                                  const char *out_csv,
                                  double sigma_z_m,
                                  double beta_m,
                                  double gps_rate_hz,
                                  double frame_rate_hz,
                                  size_t n_frames);

/**
 * Cut a heading-up map+route patch and write it as an f32 tensor (`.bin`
 * plus JSON sidecar). `route_lat_lon` holds `route_len` interleaved
 * `lat, lon` pairs; `route_len` must be 16. A non-finite `heading_deg`
 * means "derive the heading from the route".
 */
enum GmStatus gm_patch_sample(const struct GmRaster *raster,
                              const double *route_lat_lon,
                              size_t route_len,
                              double heading_deg,
                              double radius_m,
                              size_t out_size_px,
                              const char *out_path);

/**
 * Score a predicted saliency map against ground truth. Both files may be
 * PGM or f32 tensors (picked by extension). Fixations are the ground-truth
 * cells at or above `fixation_percentile`. Outputs may be NULL when a
 * metric is not wanted; CC is NaN when either map is constant.
 */
enum GmStatus gm_saliency_metrics_from_files(const char *pred_path,
                                             const char *gt_path,
                                             double fixation_percentile,
                                             double *out_kld,
                                             double *out_cc,
                                             double *out_nss,
                                             double *out_sim);

/**
 * Run the full pipeline described by a TOML config. On success and when
 * `out_report_json` is non-NULL it receives the metrics report as a JSON
 * string owned by the caller; release it with `gm_string_free`.
 */
enum GmStatus gm_pipeline_run(const char *config_path, size_t jobs, char **out_report_json);

/**
 * Release a string returned by this library. NULL is a no-op.
 */
void gm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAZEMAP_H */
