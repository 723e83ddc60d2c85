#ifndef BOHM_FOLIATION_H
#define BOHM_FOLIATION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BfClass {
  BF_CLASS_EXOTIC = 0,
  BF_CLASS_HEAVY_TAILED = 1,
  BF_CLASS_INDETERMINATE = 2,
} BfClass;

typedef enum BfConvMode {
  BF_CONV_MODE_EXACT_DND = 0,
  BF_CONV_MODE_CONSTANT_K = 1,
} BfConvMode;

typedef enum BfOrder {
  BF_ORDER_ALICE_FIRST = 0,
  BF_ORDER_BOB_FIRST = 1,
  BF_ORDER_SIMULTANEOUS = 2,
} BfOrder;

typedef enum BfStatus {
  BF_STATUS_OK = 0,
  BF_STATUS_NULL_POINTER = 1,
  BF_STATUS_INVALID_ARGUMENT = 2,
  BF_STATUS_BETA_OUT_OF_RANGE = 3,
  BF_STATUS_DEGENERATE_TRIAD = 4,
  BF_STATUS_NON_TIMELIKE_NORMAL = 5,
  BF_STATUS_ENSEMBLE = 6,
  BF_STATUS_PROTOCOL = 7,
  BF_STATUS_BUFFER_TOO_SMALL = 8,
  BF_STATUS_PANIC = 9,
} BfStatus;

typedef enum BfZMode {
  BF_Z_MODE_HALF_OSCILLATOR = 0,
  BF_Z_MODE_TRUNCATED_GAUSSIAN = 1,
} BfZMode;

typedef struct BfHistogram BfHistogram;

// Simulated lab with a calibrated classifier and hidden foliation.
typedef struct BfLab BfLab;

// Waveguide model plus integrator settings.
typedef struct BfModel BfModel;

// Four-vector `(t, x, y, z)`.
typedef struct BfEvent4 {
  double t;
  double x;
  double y;
  double z;
} BfEvent4;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library name and version; static, do not free.
const char *bf_version(void);

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length, or 0
// if there is none.
//
// # Safety
// `buf` must be NULL or point to `len` writable bytes.
size_t bf_last_error(char *buf, size_t len);

// Frees a string returned by this library.
//
// # Safety
// `s` must be NULL or a string returned by this library, not yet freed.
void bf_string_free(char *s);

double bf_minkowski_dot(struct BfEvent4 a, struct BfEvent4 b);

// Active boost of `e` by velocity `beta[3]`.
//
// # Safety
// `beta` must point to three doubles and `out` to a writable `BfEvent4`.
enum BfStatus bf_boost(struct BfEvent4 e, const double *beta, struct BfEvent4 *out);

// Unit future-pointing normal orthogonal to three separation vectors.
//
// # Safety
// `seps` must point to three `BfEvent4` and `out` to a writable `BfEvent4`.
enum BfStatus bf_solve_normal(const struct BfEvent4 *seps, struct BfEvent4 *out);

// Order of events `a` and `b` along the foliation with normal `n`.
//
// # Safety
// `out` must point to a writable `BfOrder`.
enum BfStatus bf_temporal_order(struct BfEvent4 n,
                                struct BfEvent4 a,
                                struct BfEvent4 b,
                                double tol,
                                enum BfOrder *out);

// FLASH statistic from the four channel counts.
//
// # Safety
// `out` must point to a writable double.
enum BfStatus bf_flash_eta(uint64_t n_px, uint64_t n_mx, uint64_t n_pz, uint64_t n_mz, double *out);

// New model with the default integrator (`dt = 1e-3`).
//
// # Safety
// `out` must point to a writable handle pointer.
enum BfStatus bf_model_new(double omega,
                           double detector_l,
                           enum BfZMode z_mode,
                           enum BfConvMode conv_mode,
                           double k2,
                           struct BfModel **out);

// Overrides the integrator step and horizon.
//
// # Safety
// `m` must be a live model handle.
enum BfStatus bf_model_set_integrator(struct BfModel *m, double dt, double t_max);

// # Safety
// `m` must be NULL or a handle from [`bf_model_new`], not yet freed.
void bf_model_free(struct BfModel *m);

// Arrival-time histogram over `[0, t_max]` of the model's integrator.
//
// `order`: Alice first or Bob first. `outcome`: 0 draws Alice's result per
// pair, +1 or -1 fixes it. `axis` is ignored when Bob is first.
//
// # Safety
// `m` must be a live model, `axis` three doubles, `out` writable.
enum BfStatus bf_arrival_distribution(const struct BfModel *m,
                                      enum BfOrder order,
                                      const double *axis,
                                      int32_t outcome,
                                      uint64_t n,
                                      uint64_t seed,
                                      size_t bins,
                                      struct BfHistogram **out);

// # Safety
// `h` must be a live histogram handle.
uint64_t bf_histogram_n_total(const struct BfHistogram *h);

// # Safety
// `h` must be a live histogram handle.
uint64_t bf_histogram_n_no_arrival(const struct BfHistogram *h);

// Fraction of trajectories arriving after `tau_c` or not at all.
//
// # Safety
// `h` must be a live histogram handle.
double bf_histogram_tail_mass(const struct BfHistogram *h, double tau_c);

// Latest arrival time, or NaN when nothing arrived.
//
// # Safety
// `h` must be a live histogram handle.
double bf_histogram_tau_max(const struct BfHistogram *h);

// Copies bin counts into `counts`. `*len` holds the capacity on entry and
// the number of bins on return.
//
// # Safety
// `h` must be live; `counts` must hold `*len` values.
enum BfStatus bf_histogram_counts(const struct BfHistogram *h, uint64_t *counts, size_t *len);

// Histogram as CSV text; free with [`bf_string_free`].
//
// # Safety
// `h` must be a live histogram handle.
char *bf_histogram_csv(const struct BfHistogram *h);

// # Safety
// `h` must be NULL or a histogram handle, not yet freed.
void bf_histogram_free(struct BfHistogram *h);

// Builds a simulated lab from a JSON run configuration (NULL or `{}` for
// defaults) and calibrates its classifier. Calibration runs two reference
// ensembles of `classifier.calibration_n` trajectories.
//
// # Safety
// `config_json` must be NULL or a NUL-terminated string; `out` writable.
enum BfStatus bf_lab_new(const char *config_json, struct BfLab **out);

// Calibrated cutoff time `τ_c` of the lab's classifier.
//
// # Safety
// `lab` must be a live lab handle.
double bf_lab_tau_c(const struct BfLab *lab);

// Classifies a histogram with the lab's classifier.
//
// # Safety
// Both handles must be live; `out` writable.
enum BfStatus bf_lab_classify(const struct BfLab *lab,
                              const struct BfHistogram *h,
                              enum BfClass *out);

// Runs the foliation detection protocol and writes the recovered normal.
// `angular_error` (may be NULL) receives the diagnostic angle to the hidden
// truth. `report_json` (may be NULL) receives the full report; free it with
// [`bf_string_free`].
//
// # Safety
// `lab` must be live; `normal` writable; optional outputs NULL or writable.
enum BfStatus bf_lab_detect_foliation(struct BfLab *lab,
                                      struct BfEvent4 *normal,
                                      double *angular_error,
                                      char **report_json);

// Calibrates the signaling geometry and sends `bits` (each 0 or 1).
// `decoded` receives one entry per bit: 0, 1, or -1 for an erasure.
//
// # Safety
// `lab` must be live; `bits` and `decoded` must hold `n_bits` entries;
// `bit_error_rate` NULL or writable.
enum BfStatus bf_lab_signal(struct BfLab *lab,
                            const uint8_t *bits,
                            size_t n_bits,
                            uint64_t pairs_per_bit,
                            int8_t *decoded,
                            double *bit_error_rate);

// # Safety
// `lab` must be NULL or a handle from [`bf_lab_new`], not yet freed.
void bf_lab_free(struct BfLab *lab);

// Normal of the rest frame of an observer moving with `beta[3]`.
//
// # Safety
// `beta` must point to three doubles and `out` to a writable `BfEvent4`.
enum BfStatus bf_normal_from_boost(const double *beta, struct BfEvent4 *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BOHM_FOLIATION_H */
