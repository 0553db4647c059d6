#ifndef FEDKERNEL_H
#define FEDKERNEL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FkStatus {
  FK_STATUS_OK = 0,
  FK_STATUS_NULL_POINTER = 1,
  FK_STATUS_INVALID_ARGUMENT = 2,
  FK_STATUS_SHAPE = 3,
  FK_STATUS_EMPTY_INPUT = 4,
  FK_STATUS_UNSUPPORTED = 5,
  FK_STATUS_CONFIG = 6,
  FK_STATUS_UNSTABLE = 7,
  FK_STATUS_NUMERIC = 8,
  FK_STATUS_DEGENERATE = 9,
  FK_STATUS_EMPTY_SELECTION = 10,
  FK_STATUS_IO = 11,
  FK_STATUS_PARSE = 12,
  FK_STATUS_PANIC = 13,
} FkStatus;

typedef enum FkFamily {
  FK_FAMILY_LINEAR_HOMOGENEOUS = 0,
  FK_FAMILY_HETEROGENEOUS = 1,
  FK_FAMILY_SUBSPACE = 2,
  FK_FAMILY_CHEBYSHEV = 3,
} FkFamily;

typedef enum FkLayout {
  FK_LAYOUT_ANCHORED = 0,
  FK_LAYOUT_SYMMETRIC = 1,
} FkLayout;

typedef enum FkAlgorithmKind {
  FK_ALGORITHM_KIND_FED_AVG = 0,
  FK_ALGORITHM_KIND_FED_PROX = 1,
} FkAlgorithmKind;

/**
 * Opaque federated dataset.
 */
typedef struct FkDataset FkDataset;

/**
 * Opaque trained model: final coefficients over the dataset's feature map.
 */
typedef struct FkModel FkModel;

/**
 * Synthetic scenario. `sizes` may be NULL to keep the family's default
 * client sizes (10 points per client for Chebyshev); `dim` of 0 keeps the
 * default dimension.
 */
typedef struct FkScenario {
  enum FkFamily family;
  const size_t *sizes;
  size_t num_clients;
  size_t dim;
  double sigma;
  uint64_t seed;
  /**
   * Model spread for the heterogeneous family.
   */
  double heterogeneity;
  enum FkLayout layout;
  /**
   * Covariate rank for the subspace family.
   */
  size_t rank;
} FkScenario;

/**
 * Training settings. `batch_size` of 0 means full batch; `local_steps` is
 * ignored by FedProx.
 */
typedef struct FkAlgorithm {
  enum FkAlgorithmKind kind;
  size_t local_steps;
  double eta;
  size_t rounds;
  size_t batch_size;
  bool early_stop;
} FkAlgorithm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static description of a status code.
 */
const char *fk_status_message(enum FkStatus status);

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next `fk_*` call on the same thread.
 */
const char *fk_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fk_version(void);

/**
 * Draws a synthetic dataset.
 *
 * # Safety
 * `scenario` must point to a valid `FkScenario` whose `sizes` (when not
 * NULL) holds `num_clients` entries; `out` must be writable.
 */
enum FkStatus fk_dataset_generate(const struct FkScenario *scenario, struct FkDataset **out);

/**
 * Builds a linear-kernel dataset from row-major covariates.
 *
 * `covariates` holds `sum(sizes) * dim` values and `responses` holds
 * `sum(sizes)` values, clients stored one after another.
 *
 * # Safety
 * The arrays must have the lengths stated above; `out` must be writable.
 */
enum FkStatus fk_dataset_from_arrays(const double *covariates,
                                     const double *responses,
                                     const size_t *sizes,
                                     size_t num_clients,
                                     size_t dim,
                                     double sigma,
                                     struct FkDataset **out);

/**
 * Reads a dataset directory written by `fk_dataset_write` or the CLI.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum FkStatus fk_dataset_read(const char *dir, struct FkDataset **out);

/**
 * Writes `dataset` into the directory `dir`, creating it if needed.
 *
 * # Safety
 * `dataset` must be a live handle and `dir` a NUL-terminated string.
 */
enum FkStatus fk_dataset_write(const struct FkDataset *dataset, const char *dir);

/**
 * Number of clients, or 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
size_t fk_dataset_num_clients(const struct FkDataset *dataset);

/**
 * Total sample count `N`, or 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
size_t fk_dataset_total(const struct FkDataset *dataset);

/**
 * Input dimension of the covariates, or 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
size_t fk_dataset_input_dim(const struct FkDataset *dataset);

/**
 * # Safety
 * `dataset` must be NULL or a handle not yet freed.
 */
void fk_dataset_free(struct FkDataset *dataset);

/**
 * Trains from zero and returns the final model. `seed` only drives
 * minibatch ordering.
 *
 * # Safety
 * `dataset` and `algorithm` must be valid; `out` must be writable.
 */
enum FkStatus fk_train(const struct FkDataset *dataset,
                       const struct FkAlgorithm *algorithm,
                       uint64_t seed,
                       struct FkModel **out);

/**
 * Rounds actually run (smaller than requested under early stopping).
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t fk_model_rounds(const struct FkModel *model);

/**
 * Number of coefficients, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t fk_model_num_coefficients(const struct FkModel *model);

/**
 * Copies the coefficients into `buf`, which must hold at least
 * `fk_model_num_coefficients(model)` values.
 *
 * # Safety
 * `model` must be a live handle and `buf` writable for `len` doubles.
 */
enum FkStatus fk_model_coefficients(const struct FkModel *model, double *buf, size_t len);

/**
 * Predicts at `rows` row-major query points of the dataset's input
 * dimension, writing `rows` values into `out`.
 *
 * # Safety
 * `queries` must hold `rows * input_dim` doubles and `out` `rows` doubles.
 */
enum FkStatus fk_model_predict(const struct FkModel *model,
                               const double *queries,
                               size_t rows,
                               double *out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void fk_model_free(struct FkModel *model);

/**
 * `gamma = eta * max_i ||K_{x_i}||`.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum FkStatus fk_gamma(const struct FkDataset *dataset, double eta, double *out);

/**
 * Condition-number bound for the algorithm at the given `gamma`.
 *
 * # Safety
 * `algorithm` must be valid; `out` must be writable.
 */
enum FkStatus fk_kappa(double gamma, const struct FkAlgorithm *algorithm, double *out);

/**
 * Early-stopping time for the dataset under the algorithm's step size
 * and local steps. `saturated` is set when the search hit its cap.
 *
 * # Safety
 * `dataset` and `algorithm` must be valid; outputs must be writable.
 */
enum FkStatus fk_early_stopping_time(const struct FkDataset *dataset,
                                     const struct FkAlgorithm *algorithm,
                                     size_t *out_t,
                                     bool *out_saturated);

/**
 * Runs an experiment config and writes its run directory. `out_dir` may be
 * NULL to use the usual resolution (environment, config, default).
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out_dir` NULL or one.
 */
enum FkStatus fk_run_experiment(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDKERNEL_H */
