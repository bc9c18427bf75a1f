#ifndef XBAR_SNN_H
#define XBAR_SNN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum XsnnCircuitMode {
  XSNN_CIRCUIT_MODE_IDEAL = 0,
  XSNN_CIRCUIT_MODE_NODAL = 1,
  XSNN_CIRCUIT_MODE_APPROX = 2,
} XsnnCircuitMode;

/**
 * Result code of every fallible call. `Ok` is 0.
 */
typedef enum XsnnStatus {
  XSNN_STATUS_OK = 0,
  XSNN_STATUS_NULL_POINTER = 1,
  XSNN_STATUS_INVALID_ARGUMENT = 2,
  XSNN_STATUS_IO = 3,
  XSNN_STATUS_FORMAT = 4,
  XSNN_STATUS_SOLVER = 5,
  XSNN_STATUS_STRUCTURE = 6,
  XSNN_STATUS_PANIC = 7,
  XSNN_STATUS_OTHER = 8,
} XsnnStatus;

/**
 * Opaque network handle.
 */
typedef struct XsnnModel XsnnModel;

/**
 * Device and parasitic parameters of a crossbar tile. Resistances in ohms,
 * conductances in siemens.
 */
typedef struct XsnnCrossbarConfig {
  size_t rows;
  size_t cols;
  double r_driver;
  double r_wire_row;
  double r_wire_col;
  double r_sense;
  double g_min;
  double g_max;
  double sigma_over_mu;
  double v_read;
  double solver_tol;
  enum XsnnCircuitMode circuit_mode;
} XsnnCrossbarConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *xsnn_version(void);

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *xsnn_last_error(void);

/**
 * Fills `out` with the default crossbar parameters.
 *
 * # Safety
 * `out` must be null or point to writable memory for one config.
 */
enum XsnnStatus xsnn_crossbar_config_default(struct XsnnCrossbarConfig *out);

/**
 * Loads a model container from `path` into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer slot.
 */
enum XsnnStatus xsnn_model_load(const char *path, struct XsnnModel **out);

/**
 * Writes `model` to `path` atomically.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum XsnnStatus xsnn_model_save(const struct XsnnModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void xsnn_model_free(struct XsnnModel *model);

/**
 * Simulation length of an SNN, 0 for an ANN. Returns 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t xsnn_model_time_steps(const struct XsnnModel *model);

/**
 * Number of output classes. Returns 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t xsnn_model_classes(const struct XsnnModel *model);

/**
 * Copies `[channels, height, width]` of one input image into `out`.
 *
 * # Safety
 * `model` must be a live handle and `out` point to three writable `size_t`.
 */
enum XsnnStatus xsnn_model_input_shape(const struct XsnnModel *model, size_t *out);

/**
 * Maps every weighted layer of `model` onto crossbars described by `config`
 * (null for defaults) and returns the model with the resulting non-ideal
 * weights as a new handle.
 *
 * # Safety
 * `model` must be a live handle, `config` null or valid, `out` a writable
 * pointer slot.
 */
enum XsnnStatus xsnn_model_nonidealize(const struct XsnnModel *model,
                                       const struct XsnnCrossbarConfig *config,
                                       uint64_t seed,
                                       struct XsnnModel **out);

/**
 * Runs `n` images (row-major `n x C x H x W`, values in [0, 1]) through the
 * network and writes `n x classes` outputs: logits for an ANN, accumulated
 * output potential for an SNN. `time_steps` 0 uses the model's own.
 *
 * # Safety
 * `images` must hold `n * C * H * W` doubles and `out` room for
 * `n * classes`.
 */
enum XsnnStatus xsnn_model_forward(const struct XsnnModel *model,
                                   const double *images,
                                   size_t n,
                                   size_t time_steps,
                                   uint64_t seed,
                                   double *out);

/**
 * Effective conductances of one tile under `config` (null for defaults).
 * `g` and `out` are row-major `rows x cols`; rows and cols override the
 * config's. Every `g` must lie in `[g_min, g_max]`.
 *
 * # Safety
 * `g` and `out` must each hold `rows * cols` doubles.
 */
enum XsnnStatus xsnn_effective_conductance(const double *g,
                                           size_t rows,
                                           size_t cols,
                                           const struct XsnnCrossbarConfig *config,
                                           double *out);

/**
 * Relative accuracy degradation `(sw - hw) / sw * 100`.
 *
 * # Safety
 * `out` must be a writable double.
 */
enum XsnnStatus xsnn_delta_metric(double sw, double hw, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XBAR_SNN_H */
