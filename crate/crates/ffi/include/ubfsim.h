#ifndef UBFSIM_H
#define UBFSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UbfStatus {
  UBF_STATUS_OK = 0,
  UBF_STATUS_NULL_ARGUMENT = 1,
  UBF_STATUS_INVALID_UTF8 = 2,
  /**
   * Scenario JSON could not be parsed.
   */
  UBF_STATUS_PARSE = 3,
  /**
   * Scenario parsed but failed validation.
   */
  UBF_STATUS_INVALID = 4,
  UBF_STATUS_IO = 5,
  /**
   * A trace line could not be decoded.
   */
  UBF_STATUS_BAD_TRACE = 6,
  /**
   * The trace was not produced from this scenario.
   */
  UBF_STATUS_TRACE_MISMATCH = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  UBF_STATUS_INTERNAL = 8,
} UbfStatus;

/**
 * State for answering identity queries on behalf of one host.
 */
typedef struct UbfRegistry UbfRegistry;

/**
 * The checker's verdict on a trace.
 */
typedef struct UbfReport UbfReport;

/**
 * A loaded, validated scenario.
 */
typedef struct UbfScenario UbfScenario;

/**
 * A simulation trace.
 */
typedef struct UbfTrace UbfTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *ubf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ubf_version(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void ubf_string_free(char *s);

/**
 * Loads and validates a scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UbfStatus ubf_scenario_load(const char *path, struct UbfScenario **out);

/**
 * Parses and validates a scenario from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum UbfStatus ubf_scenario_from_json(const char *json, struct UbfScenario **out);

/**
 * Hex SHA-256 digest of the scenario, written to `*out`.
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum UbfStatus ubf_scenario_digest(const struct UbfScenario *scenario, char **out);

/**
 * # Safety
 * `scenario` must be NULL or a handle from this library, not yet freed.
 */
void ubf_scenario_free(struct UbfScenario *scenario);

/**
 * Runs the scenario with `seed` and returns the trace.
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum UbfStatus ubf_run(const struct UbfScenario *scenario, uint64_t seed, struct UbfTrace **out);

/**
 * Number of records in the trace, or 0 for NULL.
 *
 * # Safety
 * `trace` must be NULL or a live handle.
 */
size_t ubf_trace_len(const struct UbfTrace *trace);

/**
 * The trace as JSON Lines.
 *
 * # Safety
 * `trace` must be a live handle; `out` must be writable.
 */
enum UbfStatus ubf_trace_to_jsonl(const struct UbfTrace *trace, char **out);

/**
 * Parses JSON Lines back into a trace.
 *
 * # Safety
 * `jsonl` must be a NUL-terminated string; `out` must be writable.
 */
enum UbfStatus ubf_trace_from_jsonl(const char *jsonl, struct UbfTrace **out);

/**
 * # Safety
 * `trace` must be NULL or a handle from this library, not yet freed.
 */
void ubf_trace_free(struct UbfTrace *trace);

/**
 * Audits `trace` against `scenario`.
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum UbfStatus ubf_check(const struct UbfScenario *scenario,
                         const struct UbfTrace *trace,
                         struct UbfReport **out);

/**
 * Number of violations, or 0 for NULL.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
size_t ubf_report_violations(const struct UbfReport *report);

/**
 * Number of mediated cross-user flows, or 0 for NULL.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
size_t ubf_report_mediated(const struct UbfReport *report);

/**
 * The full report as pretty-printed JSON.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum UbfStatus ubf_report_to_json(const struct UbfReport *report, char **out);

/**
 * The report in the CLI's text format.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum UbfStatus ubf_report_to_text(const struct UbfReport *report, char **out);

/**
 * # Safety
 * `report` must be NULL or a handle from this library, not yet freed.
 */
void ubf_report_free(struct UbfReport *report);

/**
 * Builds responder state for `host` (NULL for the first host) from a scenario.
 *
 * # Safety
 * `scenario` must be a live handle; `host` must be NULL or a NUL-terminated
 * string; `out` must be writable.
 */
enum UbfStatus ubf_registry_new(const struct UbfScenario *scenario,
                                const char *host,
                                struct UbfRegistry **out);

/**
 * Answers one request line (including its trailing newline) and writes the
 * reply line to `*out`. Malformed requests get an `ERR` reply, not a failure status.
 *
 * # Safety
 * `registry` must be a live handle; `request` must point to `len` readable
 * bytes; `out` must be writable.
 */
enum UbfStatus ubf_registry_respond(const struct UbfRegistry *registry,
                                    const uint8_t *request,
                                    size_t len,
                                    char **out);

/**
 * # Safety
 * `registry` must be NULL or a handle from this library, not yet freed.
 */
void ubf_registry_free(struct UbfRegistry *registry);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UBFSIM_H */
