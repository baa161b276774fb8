#ifndef NETSTAB_H
#define NETSTAB_H

#pragma once

#include <stddef.h>
#include <stdint.h>

typedef enum NsStatus {
  NS_STATUS_OK = 0,
  NS_STATUS_NULL_POINTER = 1,
  NS_STATUS_INVALID_UTF8 = 2,
  // Unreadable or invalid scenario.
  NS_STATUS_LOAD = 3,
  NS_STATUS_IO = 4,
  // A consistent parameter set became empty.
  NS_STATUS_INCONSISTENT = 5,
  // Local closed-loop synthesis or identification failed.
  NS_STATUS_INFEASIBLE = 6,
  NS_STATUS_OUT_OF_RANGE = 7,
  NS_STATUS_BUFFER_TOO_SMALL = 8,
  NS_STATUS_INTERNAL = 9,
  NS_STATUS_PANIC = 10,
} NsStatus;

// Which per-step series of a trace to copy.
typedef enum NsSeries {
  NS_SERIES_STATE = 0,
  NS_SERIES_INPUT = 1,
  NS_SERIES_DISTURBANCE = 2,
  NS_SERIES_ESTIMATE = 3,
} NsSeries;

// Validated scenario.
typedef struct NsScenario NsScenario;

// Completed (or diverged) episode.
typedef struct NsTrace NsTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread, NUL-terminated and truncated
// to `len` bytes. Returns the full message length (excluding the NUL).
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t ns_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *ns_version(void);

// Parses and validates a scenario JSON document.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum NsStatus ns_scenario_from_json(const char *json, struct NsScenario **out);

// Loads and validates a scenario file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum NsStatus ns_scenario_load(const char *path, struct NsScenario **out);

// # Safety
// `scenario` must be null or a handle from `ns_scenario_*`, not yet freed.
void ns_scenario_free(struct NsScenario *scenario);

// Global state and input dimensions, horizon and final time.
//
// # Safety
// `scenario` must be a live handle; every out pointer must be writable.
enum NsStatus ns_scenario_dims(const struct NsScenario *scenario,
                               size_t *n_x,
                               size_t *n_u,
                               size_t *horizon,
                               size_t *t_final);

// Runs one episode. Divergence is not an error: query `ns_trace_status`.
//
// # Safety
// `scenario` must be a live handle; `out` must be writable.
enum NsStatus ns_run(const struct NsScenario *scenario, struct NsTrace **out);

// # Safety
// `trace` must be null or a handle from `ns_run`, not yet freed.
void ns_trace_free(struct NsTrace *trace);

// Number of recorded states (`T + 1` for a completed run).
//
// # Safety
// `trace` must be a live handle; `len` must be writable.
enum NsStatus ns_trace_len(const struct NsTrace *trace, size_t *len);

// `diverged` is set to 1 and `at` to the divergence time if the state blew up.
//
// # Safety
// `trace` must be a live handle; out pointers must be writable.
enum NsStatus ns_trace_status(const struct NsTrace *trace, int32_t *diverged, size_t *at);

// `sup_t ‖x(t)‖∞` and `sup_t ‖u(t)‖∞`.
//
// # Safety
// `trace` must be a live handle; out pointers must be writable.
enum NsStatus ns_trace_sup(const struct NsTrace *trace, double *sup_x, double *sup_u);

// Copies one vector of a series at time `t` into `buf`; `written` receives
// its length. With `buf == NULL` only the length is reported.
//
// # Safety
// `trace` must be a live handle; `buf` must be null or hold `len` doubles.
enum NsStatus ns_trace_get(const struct NsTrace *trace,
                           enum NsSeries series,
                           size_t t,
                           double *buf,
                           size_t len,
                           size_t *written);

// Writes `trace.csv`, `columns.json` and `reports.json` into `dir`.
//
// # Safety
// `trace` must be a live handle; `dir` must be a NUL-terminated string.
enum NsStatus ns_trace_write(const struct NsTrace *trace, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NETSTAB_H */
