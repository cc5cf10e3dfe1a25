#ifndef BALANCE_H
#define BALANCE_H

/* Generated by cbindgen from the balance-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every API call.
typedef enum BalanceStatus {
  BALANCE_STATUS_OK = 0,
  BALANCE_STATUS_NULL_ARGUMENT = 1,
  BALANCE_STATUS_INVALID_UTF8 = 2,
  BALANCE_STATUS_IO_ERROR = 3,
  BALANCE_STATUS_PARSE_ERROR = 4,
  BALANCE_STATUS_VALIDATION_ERROR = 5,
  BALANCE_STATUS_MODE_MISMATCH = 6,
  BALANCE_STATUS_SDP_FAILURE = 7,
  BALANCE_STATUS_NOT_ZERO_SUM = 8,
  BALANCE_STATUS_TOO_LARGE = 9,
  BALANCE_STATUS_INVALID_ARGUMENT = 10,
  BALANCE_STATUS_INTERNAL_ERROR = 11,
} BalanceStatus;

// Input norm regime for generated instances.
typedef enum BalanceNormMode {
  BALANCE_NORM_MODE_L2_UNIT = 0,
  BALANCE_NORM_MODE_LINF_UNIT = 1,
} BalanceNormMode;

// Walk variant selector.
typedef enum BalanceMode {
  BALANCE_MODE_L2_TO_L2 = 0,
  BALANCE_MODE_LINF_TO_L2 = 1,
} BalanceMode;

// Algorithm selector for `balance_run`.
typedef enum BalanceAlgorithm {
  BALANCE_ALGORITHM_FULL_ASI = 0,
  BALANCE_ALGORITHM_SI_ONLY = 1,
} BalanceAlgorithm;

// Opaque validated instance handle.
typedef struct BalanceInstance BalanceInstance;

// Opaque Steinitz ordering handle.
typedef struct BalanceOrdering BalanceOrdering;

// Opaque finished-run handle.
typedef struct BalanceReport BalanceReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread. The
// pointer stays valid until the next failing call on the same thread.
const char *balance_last_error_message(void);

// Loads and validates a JSON instance file.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid
// pointer; the returned handle must be released with
// `balance_instance_free`.
enum BalanceStatus balance_instance_load(const char *path, struct BalanceInstance **out);

// Generates a seeded random instance.
//
// # Safety
// `out` must be a valid pointer; release the handle with
// `balance_instance_free`.
enum BalanceStatus balance_instance_generate(uintptr_t n,
                                             uintptr_t d,
                                             enum BalanceNormMode norm_mode,
                                             uint64_t seed,
                                             struct BalanceInstance **out);

// Appends balancing columns so the column sum is zero, returning a new
// handle.
//
// # Safety
// `inst` must be a live handle from this library and `out` valid.
enum BalanceStatus balance_instance_make_zero_sum(const struct BalanceInstance *inst,
                                                  struct BalanceInstance **out);

// Reads the dimensions of an instance.
//
// # Safety
// All pointers must be valid.
enum BalanceStatus balance_instance_dims(const struct BalanceInstance *inst,
                                         uintptr_t *d,
                                         uintptr_t *n);

// # Safety
// `inst` must be a handle from this library, not yet freed.
void balance_instance_free(struct BalanceInstance *inst);

// Runs the coloring walk to completion.
//
// # Safety
// `inst` must be a live handle and `out` valid; release the report
// with `balance_report_free`.
enum BalanceStatus balance_run(const struct BalanceInstance *inst,
                               enum BalanceMode mode,
                               enum BalanceAlgorithm algorithm,
                               double dt,
                               uint64_t seed,
                               struct BalanceReport **out);

// Final (rounded) max prefix discrepancies of a run.
//
// # Safety
// All pointers must be valid.
enum BalanceStatus balance_report_discrepancy(const struct BalanceReport *report,
                                              double *max_l2,
                                              double *max_linf);

// Step count of a finished run.
//
// # Safety
// All pointers must be valid.
enum BalanceStatus balance_report_steps(const struct BalanceReport *report, uint64_t *steps);

// Copies the final coloring (+1/-1 per column) into `buf`.
//
// # Safety
// `buf` must point to at least `len` writable bytes; `len` must equal
// the instance's n.
enum BalanceStatus balance_report_coloring(const struct BalanceReport *report,
                                           int8_t *buf,
                                           uintptr_t len);

// # Safety
// `report` must be a handle from this library, not yet freed.
void balance_report_free(struct BalanceReport *report);

// Orders a zero-sum instance; see the `balance_ordering_*` accessors.
//
// # Safety
// `inst` must be a live handle and `out` valid; release with
// `balance_ordering_free`.
enum BalanceStatus balance_steinitz_order(const struct BalanceInstance *inst,
                                          uint64_t seed,
                                          struct BalanceOrdering **out);

// Exact max prefix l2 norm achieved by the ordering.
//
// # Safety
// All pointers must be valid.
enum BalanceStatus balance_ordering_max_prefix_norm(const struct BalanceOrdering *ordering,
                                                    double *value);

// Copies the permutation (original index per position) into `buf`.
//
// # Safety
// `buf` must point to at least `len` writable entries; `len` must
// equal the instance's n.
enum BalanceStatus balance_ordering_permutation(const struct BalanceOrdering *ordering,
                                                uintptr_t *buf,
                                                uintptr_t len);

// # Safety
// `ordering` must be a handle from this library, not yet freed.
void balance_ordering_free(struct BalanceOrdering *ordering);

// Brute-force optimal max prefix l2 discrepancy (n <= 16).
//
// # Safety
// All pointers must be valid.
enum BalanceStatus balance_oracle(const struct BalanceInstance *inst, double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BALANCE_H */
