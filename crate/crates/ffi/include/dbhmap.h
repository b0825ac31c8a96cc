#ifndef DBHMAP_H
#define DBHMAP_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DbhmapStatus {
  DBHMAP_STATUS_OK = 0,
  DBHMAP_STATUS_NULL_POINTER = 1,
  DBHMAP_STATUS_INVALID_CONFIG = 2,
  DBHMAP_STATUS_IO = 3,
  DBHMAP_STATUS_PARSE = 4,
  DBHMAP_STATUS_INVALID_DATA = 5,
  DBHMAP_STATUS_INSUFFICIENT_DATA = 6,
  DBHMAP_STATUS_PROCESSING = 7,
  DBHMAP_STATUS_PANIC = 8,
} DbhmapStatus;

/**
 * Outcome of one tree, mirroring the library's estimate status.
 */
typedef enum DbhmapEstimateStatus {
  DBHMAP_ESTIMATE_STATUS_OK = 0,
  DBHMAP_ESTIMATE_STATUS_EMPTY_SLICE = 1,
  DBHMAP_ESTIMATE_STATUS_INSUFFICIENT_POINTS = 2,
  DBHMAP_ESTIMATE_STATUS_DEGENERATE_AXIS = 3,
  DBHMAP_ESTIMATE_STATUS_NO_FIT = 4,
} DbhmapEstimateStatus;

/**
 * Method chains, in the order `A_LLS`, `A_N`, `A_LLS+C_NLS`, `A_N+C_NLS`,
 * `A_LLS+C_NLSN`, `A_N+C_NLSN`.
 */
typedef enum DbhmapMethod {
  DBHMAP_METHOD_AXIS_LLS = 0,
  DBHMAP_METHOD_AXIS_VERTICAL = 1,
  DBHMAP_METHOD_AXIS_LLS_NLS = 2,
  DBHMAP_METHOD_AXIS_VERTICAL_NLS = 3,
  DBHMAP_METHOD_AXIS_LLS_NLSN = 4,
  DBHMAP_METHOD_AXIS_VERTICAL_NLSN = 5,
} DbhmapMethod;

typedef struct DbhmapCloud DbhmapCloud;

typedef struct DbhmapDtm DbhmapDtm;

typedef struct DbhmapEstimationParams {
  /**
   * A `DbhmapMethod` value.
   */
  uint32_t method;
  /**
   * Normal-estimation neighbours.
   */
  size_t q;
  size_t n_cyls;
  /**
   * Slice thickness, meters.
   */
  double h;
  /**
   * RANSAC inlier tolerance, meters.
   */
  double epsilon;
  /**
   * Non-zero votes with the mean instead of the median.
   */
  int32_t mean_voting;
} DbhmapEstimationParams;

typedef struct DbhmapEstimate {
  /**
   * Meters; NaN when the tree failed.
   */
  double diameter_m;
  enum DbhmapEstimateStatus status;
  /**
   * Bands that produced a fit.
   */
  size_t fitted_bands;
} DbhmapEstimate;

typedef struct DbhmapMetrics {
  /**
   * NaN when every considered observation failed.
   */
  double rmse_cm;
  double bias_cm;
  double fail_rate;
  size_t n_total;
  size_t n_failed;
  size_t n_excluded;
} DbhmapMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * Valid until the next call on this thread.
 */
const char *dbhmap_last_error_message(void);

/**
 * Library version, static.
 */
const char *dbhmap_version(void);

/**
 * Cloud from `n` points stored as `x, y, z` triples.
 */
enum DbhmapStatus dbhmap_cloud_new(const double *xyz, size_t n, struct DbhmapCloud **out);

/**
 * Reads a `.ply` or `.csv` cloud.
 */
enum DbhmapStatus dbhmap_cloud_load(const char *path, struct DbhmapCloud **out);

/**
 * Writes a `.ply` or `.csv` cloud.
 */
enum DbhmapStatus dbhmap_cloud_save(const struct DbhmapCloud *cloud, const char *path);

/**
 * Number of points; 0 for NULL.
 */
size_t dbhmap_cloud_len(const struct DbhmapCloud *cloud);

/**
 * Copies up to `capacity` points as `x, y, z` triples into `xyz` and
 * stores the number copied in `written`.
 */
enum DbhmapStatus dbhmap_cloud_points(const struct DbhmapCloud *cloud,
                                      double *xyz,
                                      size_t capacity,
                                      size_t *written);

void dbhmap_cloud_free(struct DbhmapCloud *cloud);

/**
 * Registers `n` scans into one map with default ICP settings.
 *
 * `odometry` holds `n` poses; the first one anchors the map frame. The
 * refined poses are written to `poses_out` (`n` poses) when it is not NULL.
 */
enum DbhmapStatus dbhmap_map_build(const struct DbhmapCloud *const *scans,
                                   size_t n,
                                   const double *odometry,
                                   struct DbhmapCloud **map_out,
                                   double *poses_out);

/**
 * Terrain raster with the given cell size (meters) and height percentile.
 */
enum DbhmapStatus dbhmap_dtm_build(const struct DbhmapCloud *map,
                                   double cell_size,
                                   double percentile,
                                   struct DbhmapDtm **out);

enum DbhmapStatus dbhmap_dtm_ground_height(const struct DbhmapDtm *dtm,
                                           double x,
                                           double y,
                                           double *out);

void dbhmap_dtm_free(struct DbhmapDtm *dtm);

/**
 * Library defaults.
 */
enum DbhmapStatus dbhmap_estimation_params_default(struct DbhmapEstimationParams *out);

/**
 * Estimates the DBH of the tree inside the box `box_min`..`box_max` (3
 * doubles each). A tree that cannot be fitted is not an error: the call
 * succeeds and `out` carries the failure status.
 */
enum DbhmapStatus dbhmap_estimate_tree(const struct DbhmapCloud *map,
                                       const struct DbhmapDtm *dtm,
                                       const double *box_min,
                                       const double *box_max,
                                       const struct DbhmapEstimationParams *params,
                                       uint64_t seed,
                                       struct DbhmapEstimate *out);

/**
 * Scores `n` estimates against truth (meters). A NaN estimate counts as a
 * failure; observations farther than `max_distance` are excluded.
 */
enum DbhmapStatus dbhmap_compute_metrics(const double *estimates_m,
                                         const double *truths_m,
                                         const double *distances_m,
                                         size_t n,
                                         double fail_threshold,
                                         double max_distance,
                                         struct DbhmapMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DBHMAP_H */
