#ifndef QCML_H
#define QCML_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QcmlStatus {
  QCML_STATUS_OK = 0,
  QCML_STATUS_NULL_POINTER = 1,
  QCML_STATUS_INVALID_ARGUMENT = 2,
  QCML_STATUS_SCHEMA = 3,
  QCML_STATUS_DATA = 4,
  QCML_STATUS_NUMERIC = 5,
  QCML_STATUS_IO = 6,
  QCML_STATUS_FORMAT = 7,
  QCML_STATUS_NO_OOB_COVER = 8,
  QCML_STATUS_CONFIG = 9,
  QCML_STATUS_PANIC = 10,
} QcmlStatus;

/**
 * Fitted regression forest with bootstrap bookkeeping.
 */
typedef struct QcmlForest QcmlForest;

/**
 * Trained QCML model.
 */
typedef struct QcmlModel QcmlModel;

/**
 * Dense proximity matrix.
 */
typedef struct QcmlProximity QcmlProximity;

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *qcml_last_error_message(void);

/**
 * NUL-terminated crate version.
 */
const char *qcml_version(void);

/**
 * Trains a model on a row-major `n_rows × n_cols` feature matrix in
 * original units. Remaining hyperparameters take their defaults
 * (Adam, batch 32, MAE loss).
 */
enum QcmlStatus qcml_model_train(const double *x,
                                 size_t n_rows,
                                 size_t n_cols,
                                 const double *y,
                                 size_t hilbert_dim,
                                 size_t epochs,
                                 double learning_rate,
                                 uint64_t seed,
                                 struct QcmlModel **out);

enum QcmlStatus qcml_model_load(const char *path, struct QcmlModel **out);

enum QcmlStatus qcml_model_save(const struct QcmlModel *model, const char *path);

/**
 * Number of input features, or 0 for a null handle.
 */
size_t qcml_model_n_features(const struct QcmlModel *model);

/**
 * Hilbert-space dimension, or 0 for a null handle.
 */
size_t qcml_model_hilbert_dim(const struct QcmlModel *model);

/**
 * Target forecast for one point in original feature units.
 */
enum QcmlStatus qcml_model_forecast(const struct QcmlModel *model,
                                    const double *x,
                                    size_t len,
                                    double *out);

/**
 * Ground-state amplitudes for one point. `re` and `im` must each hold
 * `capacity ≥ hilbert_dim` values.
 */
enum QcmlStatus qcml_model_embed(const struct QcmlModel *model,
                                 const double *x,
                                 size_t len,
                                 double *re,
                                 double *im,
                                 size_t capacity);

void qcml_model_free(struct QcmlModel *model);

/**
 * Fits a regression forest. `criterion`: 0 = squared error, 1 = absolute
 * error. `max_features`: 0 = √K, otherwise all features.
 */
enum QcmlStatus qcml_forest_fit(const double *x,
                                size_t n_rows,
                                size_t n_cols,
                                const double *y,
                                size_t n_trees,
                                size_t max_depth,
                                size_t min_samples_leaf,
                                uint32_t max_features,
                                uint32_t criterion,
                                uint64_t seed,
                                struct QcmlForest **out);

enum QcmlStatus qcml_forest_load(const char *path, struct QcmlForest **out);

enum QcmlStatus qcml_forest_save(const struct QcmlForest *forest, const char *path);

enum QcmlStatus qcml_forest_predict(const struct QcmlForest *forest,
                                    const double *x,
                                    size_t len,
                                    double *out);

/**
 * Out-of-bag prediction for training point `index`; fails with
 * `QCML_STATUS_NO_OOB_COVER` when the point is in every bootstrap sample.
 */
enum QcmlStatus qcml_forest_oob_predict(const struct QcmlForest *forest, size_t index, double *out);

void qcml_forest_free(struct QcmlForest *forest);

/**
 * GAP proximities of every training point to every training point.
 */
enum QcmlStatus qcml_forest_prox_gap_train(const struct QcmlForest *forest,
                                           struct QcmlProximity **out);

/**
 * GAP proximities of new points (row-major `n_rows × n_cols`) to the training points.
 */
enum QcmlStatus qcml_forest_prox_gap_query(const struct QcmlForest *forest,
                                           const double *x,
                                           size_t n_rows,
                                           size_t n_cols,
                                           struct QcmlProximity **out);

/**
 * Ensemble-averaged QCML proximities between two row-major point sets
 * sharing `n_cols` features.
 */
enum QcmlStatus qcml_proximity_qcml(const struct QcmlModel *const *models,
                                    size_t n_models,
                                    const double *rows,
                                    size_t n_rows,
                                    const double *cols,
                                    size_t n_col_points,
                                    size_t n_cols,
                                    struct QcmlProximity **out);

enum QcmlStatus qcml_proximity_load(const char *path, struct QcmlProximity **out);

enum QcmlStatus qcml_proximity_save(const struct QcmlProximity *p, const char *path);

size_t qcml_proximity_rows(const struct QcmlProximity *p);

size_t qcml_proximity_cols(const struct QcmlProximity *p);

enum QcmlStatus qcml_proximity_get(const struct QcmlProximity *p,
                                   size_t row,
                                   size_t col,
                                   double *out);

/**
 * Copies the row-major values into `buf`, which must hold `rows × cols` entries.
 */
enum QcmlStatus qcml_proximity_copy(const struct QcmlProximity *p, double *buf, size_t capacity);

void qcml_proximity_free(struct QcmlProximity *p);

#endif  /* QCML_H */
