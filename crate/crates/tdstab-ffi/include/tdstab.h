#ifndef TDSTAB_H
#define TDSTAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TdStatus {
  TD_STATUS_OK = 0,
  TD_STATUS_NULL_ARGUMENT = 1,
  /**
   * Unreadable or invalid input (file, JSON, CSV, unknown bus, bad number).
   */
  TD_STATUS_INVALID_INPUT = 2,
  /**
   * No power-flow solution.
   */
  TD_STATUS_SOLVER = 3,
  TD_STATUS_ESTIMATION = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  TD_STATUS_INTERNAL = 5,
} TdStatus;

typedef enum TdLimiting {
  TD_LIMITING_TRANSMISSION_LIMITED = 0,
  TD_LIMITING_DISTRIBUTION_LIMITED = 1,
  TD_LIMITING_BOUNDARY = 2,
} TdLimiting;

typedef struct TdFrames TdFrames;

typedef struct TdNetwork TdNetwork;

typedef struct TdReport TdReport;

/**
 * Indices of one monitored node.
 */
typedef struct TdNodeIndex {
  double vsi_3ph;
  double tddi;
  enum TdLimiting limiting;
  bool critical;
} TdNodeIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *td_last_error(void);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum TdStatus td_network_load(const char *path, struct TdNetwork **out);

/**
 * # Safety
 * `json` must be a nul-terminated string and `out` writable.
 */
enum TdStatus td_network_from_json(const char *json, struct TdNetwork **out);

/**
 * # Safety
 * `net` must come from `td_network_load`/`td_network_from_json` (or be NULL).
 */
void td_network_free(struct TdNetwork *net);

/**
 * Largest uniform load scaling with a power-flow solution.
 *
 * # Safety
 * `net` must be a live handle and `out` writable.
 */
enum TdStatus td_lambda_max(const struct TdNetwork *net, double *out);

/**
 * Change of λ_max in percent for one intervention, written as in the
 * command line (`var:BUS:MVAR`, `line:FROM:TO:dup`, ...).
 *
 * # Safety
 * `net` must be a live handle, `intervention` nul-terminated, `out` writable.
 */
enum TdStatus td_whatif_delta_pct(const struct TdNetwork *net,
                                  const char *intervention,
                                  double *out);

/**
 * Frames at every loaded node for λ from `lambda_start` to `lambda_stop`.
 * `excitation` is the relative random per-phase load variation of each
 * point, `noise_sigma` the relative measurement noise.
 *
 * # Safety
 * `net` must be a live handle and `out` writable.
 */
enum TdStatus td_simulate(const struct TdNetwork *net,
                          double lambda_start,
                          double lambda_stop,
                          double lambda_step,
                          double excitation,
                          double noise_sigma,
                          uint64_t seed,
                          struct TdFrames **out);

/**
 * # Safety
 * `path` must be nul-terminated and `out` writable.
 */
enum TdStatus td_frames_read(const char *path, struct TdFrames **out);

/**
 * # Safety
 * `frames` must be a live handle and `path` nul-terminated.
 */
enum TdStatus td_frames_write(const struct TdFrames *frames, const char *path);

/**
 * Number of frames (one per substation and time step); 0 for NULL.
 *
 * # Safety
 * `frames` must be a live handle or NULL.
 */
size_t td_frames_count(const struct TdFrames *frames);

/**
 * # Safety
 * `frames` must come from this library (or be NULL).
 */
void td_frames_free(struct TdFrames *frames);

/**
 * Estimates Thevenin equivalents over the last `window` frames of each
 * substation and reports the indices at the latest frame.
 *
 * # Safety
 * `frames` must be a live handle and `out` writable.
 */
enum TdStatus td_assess(const struct TdFrames *frames, size_t window, struct TdReport **out);

/**
 * # Safety
 * `report` must come from `td_assess` (or be NULL).
 */
void td_report_free(struct TdReport *report);

/**
 * # Safety
 * `report` must be a live handle or NULL.
 */
size_t td_report_node_count(const struct TdReport *report);

/**
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum TdStatus td_report_node(const struct TdReport *report, size_t index, struct TdNodeIndex *out);

/**
 * Copies the node id (nul-terminated, truncated to `capacity`) into `buf`
 * and writes the full length without the terminator to `len`. Either may
 * be NULL to query the length only.
 *
 * # Safety
 * `report` must be a live handle; `buf` must hold `capacity` bytes.
 */
enum TdStatus td_report_node_id(const struct TdReport *report,
                                size_t index,
                                char *buf,
                                size_t capacity,
                                size_t *len);

/**
 * Transmission-side index of a substation.
 *
 * # Safety
 * `report` must be a live handle, `substation` nul-terminated, `out` writable.
 */
enum TdStatus td_report_vsi_t(const struct TdReport *report, const char *substation, double *out);

/**
 * Report as JSON; release the string with `td_string_free`.
 *
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum TdStatus td_report_to_json(const struct TdReport *report, char **out);

/**
 * # Safety
 * `s` must come from this library (or be NULL).
 */
void td_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TDSTAB_H */
