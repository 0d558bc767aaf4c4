#ifndef DRLAB_H
#define DRLAB_H

/* Generated by cbindgen from drlab-ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DrlabActivation {
  DRLAB_ACTIVATION_RELU = 0,
  DRLAB_ACTIVATION_TANH = 1,
  DRLAB_ACTIVATION_IDENTITY = 2,
} DrlabActivation;

typedef enum DrlabStatus {
  DRLAB_STATUS_OK = 0,
  DRLAB_STATUS_NULL_POINTER = 1,
  DRLAB_STATUS_INVALID_ARGUMENT = 2,
  DRLAB_STATUS_SHAPE = 3,
  DRLAB_STATUS_CONFIG = 4,
  DRLAB_STATUS_DIVERGENCE = 5,
  DRLAB_STATUS_IO = 6,
  DRLAB_STATUS_FORMAT = 7,
  DRLAB_STATUS_INGEST = 8,
  DRLAB_STATUS_SPECTRUM = 9,
  DRLAB_STATUS_INTERNAL = 10,
  DRLAB_STATUS_PANIC = 11,
} DrlabStatus;

// Opaque network handle.
typedef struct DrlabModel DrlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next drlab call on the same thread.
const char *drlab_last_error(void);

// Library version as a static NUL-terminated string.
const char *drlab_version(void);

void drlab_string_free(char *s);

// Creates a randomly initialised network with layer widths `dims[0..n_dims]`;
// `activation` is a `DrlabActivation` value.
enum DrlabStatus drlab_model_new(const size_t *dims,
                                 size_t n_dims,
                                 int32_t activation_code,
                                 uint64_t seed,
                                 struct DrlabModel **out_model);

// Loads a checkpoint written by [`drlab_model_save`] or the CLI.
enum DrlabStatus drlab_model_load(const char *path, struct DrlabModel **out_model);

enum DrlabStatus drlab_model_save(const struct DrlabModel *m, const char *path);

void drlab_model_free(struct DrlabModel *m);

enum DrlabStatus drlab_model_input_dim(const struct DrlabModel *m, size_t *out_dim);

enum DrlabStatus drlab_model_n_classes(const struct DrlabModel *m, size_t *out_n);

enum DrlabStatus drlab_model_param_count(const struct DrlabModel *m, size_t *out_n);

// Logits for `rows` inputs stored row-major in `x`; `logits` must hold
// `rows * n_classes` values.
enum DrlabStatus drlab_model_forward(const struct DrlabModel *m,
                                     const double *x,
                                     size_t rows,
                                     size_t cols,
                                     double *logits,
                                     size_t logits_len);

// Argmax class per input row; `predictions` must hold `rows` entries.
enum DrlabStatus drlab_model_predict(const struct DrlabModel *m,
                                     const double *x,
                                     size_t rows,
                                     size_t cols,
                                     size_t *predictions);

// Projects `g` onto the half-space `⟨g, g_ref⟩ ≥ 0`. `projected` is set to 1
// when the projection changed `g`.
enum DrlabStatus drlab_agem_project(const double *g,
                                    const double *g_ref,
                                    size_t len,
                                    double *out_g,
                                    int32_t *projected);

// Spectral spread ρ of a `rows × cols` representation matrix.
enum DrlabStatus drlab_rho(const double *reps, size_t rows, size_t cols, double *out_rho);

// Average accuracy after task `t` (1-based) from an `n_tasks × n_tasks`
// row-major accuracy matrix; entries above the diagonal are ignored.
enum DrlabStatus drlab_avg_accuracy(const double *acc, size_t n_tasks, size_t t, double *out_value);

// Average forgetting after task `t` (1-based); same layout as [`drlab_avg_accuracy`].
enum DrlabStatus drlab_avg_forgetting(const double *acc,
                                      size_t n_tasks,
                                      size_t t,
                                      double *out_value);

// Runs an experiment described by a JSON config and returns the run
// artifacts as a JSON array. `data_dir` may be null to use the environment.
enum DrlabStatus drlab_run_json(const char *config_json, const char *data_dir, char **out_json);

// Recomputes the summary table of a directory of artifacts and returns it
// as text.
enum DrlabStatus drlab_summarize(const char *dir, char **out_text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRLAB_H */
