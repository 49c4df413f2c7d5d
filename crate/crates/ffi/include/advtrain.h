#ifndef ADVTRAIN_H
#define ADVTRAIN_H

/* Generated by cbindgen from advtrain-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every API call.
typedef enum {
  // The call succeeded and all out-pointers were written.
  ADVTRAIN_STATUS_OK = 0,
  // A required pointer argument was NULL.
  ADVTRAIN_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  ADVTRAIN_STATUS_INVALID_UTF8 = 2,
  // A JSON document or value failed validation.
  ADVTRAIN_STATUS_INVALID_CONFIG = 3,
  // The operation itself failed (I/O, malformed file, diverged run).
  ADVTRAIN_STATUS_RUNTIME_ERROR = 4,
} AdvtrainStatus;

// An immutable dataset: a generation spec plus its example groups.
typedef struct AdvtrainDataset AdvtrainDataset;

// A model: architecture plus current weights. Training mutates it in
// place.
typedef struct AdvtrainModel AdvtrainModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string; never NULL, never
// freed.
const char *advtrain_version(void);

// Message describing the most recent failure on this thread, or an empty
// string after a success. Valid until the next `advtrain_*` call on the
// same thread; do not free.
const char *advtrain_last_error_message(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be NULL or a pointer previously returned through a
// `*mut *mut c_char` out-parameter of this library, not yet freed.
void advtrain_string_free(char *s);

// Generates a dataset. `spec_json` (optional) is a JSON object with any
// of: `task_kind` (`"relevance_ranking"` or `"pairwise_classification"`),
// `num_examples`, `vocab_size`, `seq_len`, `options`, `key_token_count`,
// `label_noise_rate`, `seed`.
//
// # Safety
// `spec_json` must be NULL or NUL-terminated; `out` must be a valid
// pointer.
AdvtrainStatus advtrain_dataset_generate(const char *spec_json, AdvtrainDataset **out);

// Loads a dataset file written by `advtrain_dataset_save` (or the CLI).
//
// # Safety
// `path` must be NUL-terminated; `out` must be a valid pointer.
AdvtrainStatus advtrain_dataset_load(const char *path, AdvtrainDataset **out);

// Writes the dataset to `path` in the line-oriented JSON format `load`
// reads.
//
// # Safety
// `dataset` must be a live handle; `path` must be NUL-terminated.
AdvtrainStatus advtrain_dataset_save(const AdvtrainDataset *dataset, const char *path);

// Number of example groups in the dataset.
//
// # Safety
// `dataset` must be a live handle; `out` must be a valid pointer.
AdvtrainStatus advtrain_dataset_len(const AdvtrainDataset *dataset, size_t *out);

// The dataset's generation spec as a JSON string.
//
// # Safety
// `dataset` must be a live handle; `out` must be a valid pointer.
AdvtrainStatus advtrain_dataset_spec_json(const AdvtrainDataset *dataset, char **out);

// Seeded shuffle split into three new datasets. The fractions must be
// non-negative and sum to one; each part inherits the parent spec, so the
// same handle splits the same way every time.
//
// # Safety
// `dataset` must be a live handle; the three out-pointers must be valid.
AdvtrainStatus advtrain_dataset_split(const AdvtrainDataset *dataset,
                                      double f_train,
                                      double f_dev,
                                      double f_test,
                                      AdvtrainDataset **out_train,
                                      AdvtrainDataset **out_dev,
                                      AdvtrainDataset **out_test);

// Releases a dataset handle. NULL is a no-op.
//
// # Safety
// `dataset` must be NULL or a live handle, not yet freed.
void advtrain_dataset_free(AdvtrainDataset *dataset);

// Initializes a model with seeded random weights. `config_json`
// (optional) may set `vocab_size`, `d_emb`, `hidden` (array of
// `{"size": n, "activation": "relu"|"tanh"}`), and `dropout_rate`.
//
// # Safety
// `config_json` must be NULL or NUL-terminated; `out` must be a valid
// pointer.
AdvtrainStatus advtrain_model_init(const char *config_json, uint64_t seed, AdvtrainModel **out);

// Loads a checkpoint written by `advtrain_model_save` (or the CLI).
//
// # Safety
// `path` must be NUL-terminated; `out` must be a valid pointer.
AdvtrainStatus advtrain_model_load(const char *path, AdvtrainModel **out);

// Writes the model's checkpoint to `path`.
//
// # Safety
// `model` must be a live handle; `path` must be NUL-terminated.
AdvtrainStatus advtrain_model_save(const AdvtrainModel *model, const char *path);

// The model's architecture as a JSON string.
//
// # Safety
// `model` must be a live handle; `out` must be a valid pointer.
AdvtrainStatus advtrain_model_config_json(const AdvtrainModel *model, char **out);

// Releases a model handle. NULL is a no-op.
//
// # Safety
// `model` must be NULL or a live handle, not yet freed.
void advtrain_model_free(AdvtrainModel *model);

// Trains the model in place on a split of `dataset`, keeping the epoch
// with the best dev accuracy. `options_json` (optional) may set `split`
// (three fractions) and `train` (objective, attack, and optimizer
// settings; see the library docs). On success, if `out_log_json` is not
// NULL it receives `{"best_epoch": ..., "epochs": [...]}`.
//
// # Safety
// `model` and `dataset` must be live handles; `options_json` must be NULL
// or NUL-terminated; `out_log_json` must be NULL or a valid pointer.
AdvtrainStatus advtrain_train(AdvtrainModel *model,
                              const AdvtrainDataset *dataset,
                              const char *options_json,
                              char **out_log_json);

// Evaluates the model on every group of `dataset` and writes an
// `EvalReport` JSON document. `attack_json` (optional) configures a
// robust-accuracy column: any of `epsilon`, `step_size`, `steps`,
// `alpha`, `init`; NULL measures clean metrics only. `batch_size` of 0
// means the default (64 groups per forward pass).
//
// # Safety
// `model` and `dataset` must be live handles; `attack_json` must be NULL
// or NUL-terminated; `out_report_json` must be a valid pointer.
AdvtrainStatus advtrain_evaluate(const AdvtrainModel *model,
                                 const AdvtrainDataset *dataset,
                                 const char *attack_json,
                                 size_t batch_size,
                                 char **out_report_json);

// Finite-difference check of every autodiff op: `trials` random points
// per op, central differences with step `fd_step`, pass threshold
// `tolerance`. Writes whether all ops passed to `out_passed`; if
// `out_json` is not NULL it receives the full per-op report.
//
// # Safety
// `out_passed` must be a valid pointer; `out_json` must be NULL or a
// valid pointer.
AdvtrainStatus advtrain_gradcheck(size_t trials,
                                  double tolerance,
                                  double fd_step,
                                  uint64_t seed,
                                  bool *out_passed,
                                  char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVTRAIN_H */
