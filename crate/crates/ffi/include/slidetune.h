#ifndef SLIDETUNE_H
#define SLIDETUNE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call. `ST_STATUS_OK` is zero.
typedef enum StStatus {
  ST_STATUS_OK = 0,
  ST_STATUS_NULL_POINTER = 1,
  ST_STATUS_INVALID_ARGUMENT = 2,
  ST_STATUS_SHAPE = 3,
  ST_STATUS_FORMAT = 4,
  ST_STATUS_IO = 5,
  ST_STATUS_STATE = 6,
  ST_STATUS_NON_FINITE = 7,
  ST_STATUS_UNDEFINED_METRIC = 8,
  ST_STATUS_CONFIG = 9,
  ST_STATUS_PANIC = 10,
} StStatus;

// Opaque bag of patch embeddings for one slide.
typedef struct StBag StBag;

// Opaque trained or freshly initialized model.
typedef struct StModel StModel;

// Training settings; start from [`st_train_config_default`].
typedef struct StTrainConfig {
  double learning_rate;
  double beta1;
  double beta2;
  double weight_decay;
  double epsilon;
  size_t epochs;
  uint64_t seed;
} StTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *st_version(void);

// Copies the calling thread's last error message into `buf`. Returns the
// buffer size needed (0 if there is no error).
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t st_last_error_message(char *buf, size_t cap);

void st_clear_error(void);

// Builds a bag from `n × d` row-major features.
//
// # Safety
// `slide_id` must be a NUL-terminated string, `features` must point to
// `n * d` doubles and `out` must be writable.
enum StStatus st_bag_new(const char *slide_id,
                         const double *features,
                         size_t n,
                         size_t d,
                         struct StBag **out);

// Reads a bag from an embedding file.
//
// # Safety
// `slide_id` and `path` must be NUL-terminated strings; `out` must be writable.
enum StStatus st_bag_load(const char *slide_id, const char *path, struct StBag **out);

// # Safety
// `bag` must be null or a handle from `st_bag_new`/`st_bag_load` not yet freed.
void st_bag_free(struct StBag *bag);

// # Safety
// `bag` must be a live handle; `n` and `d` must be writable.
enum StStatus st_bag_shape(const struct StBag *bag, size_t *n, size_t *d);

// Writes `n × d` row-major features as an embedding file; `single` selects
// 32-bit storage.
//
// # Safety
// `path` must be a NUL-terminated string and `features` must point to `n * d` doubles.
enum StStatus st_embedding_write(const char *path,
                                 const double *features,
                                 size_t n,
                                 size_t d,
                                 bool single);

// Initializes a model from a spec string such as
// `agg=mean head=mlp:512:relu dim=64 classes=10`.
//
// # Safety
// `spec` must be a NUL-terminated string; `out` must be writable.
enum StStatus st_model_new(const char *spec, uint64_t seed, struct StModel **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum StStatus st_model_load(const char *path, struct StModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum StStatus st_model_save(const struct StModel *model, const char *path);

// # Safety
// `model` must be null or a live handle not yet freed.
void st_model_free(struct StModel *model);

// Writes the canonical spec string into `buf`; returns the size needed.
//
// # Safety
// `model` must be a live handle; `buf` null or `cap` writable bytes.
size_t st_model_spec(const struct StModel *model, char *buf, size_t cap);

// # Safety
// `model` must be a live handle and the outputs writable.
enum StStatus st_model_info(const struct StModel *model,
                            size_t *num_classes,
                            size_t *input_dim,
                            size_t *num_params);

// Predicted class and softmax probabilities for one bag. `probs` may be
// null; otherwise it must hold `num_classes` doubles.
//
// # Safety
// `model`, `bag` must be live handles; `class_out` writable.
enum StStatus st_model_predict(const struct StModel *model,
                               const struct StBag *bag,
                               size_t *class_out,
                               double *probs,
                               size_t probs_len);

struct StTrainConfig st_train_config_default(void);

// Trains in place on `count` bags. `final_loss` may be null.
//
// # Safety
// `bags` must point to `count` live bag handles and `labels` to `count` values.
enum StStatus st_model_train(struct StModel *model,
                             const struct StBag *const *bags,
                             const size_t *labels,
                             size_t count,
                             const struct StTrainConfig *config,
                             double *final_loss);

// # Safety
// `labels` and `predicted` must point to `n` values; `out` writable.
enum StStatus st_balanced_accuracy(const size_t *labels,
                                   const size_t *predicted,
                                   size_t n,
                                   size_t k,
                                   double *out);

// # Safety
// `labels` and `predicted` must point to `n` values; `out` writable.
enum StStatus st_weighted_f1(const size_t *labels,
                             const size_t *predicted,
                             size_t n,
                             size_t k,
                             double *out);

// Macro one-vs-rest AUC from `n × k` row-major scores.
//
// # Safety
// `labels` must point to `n` values, `scores` to `n * k`; `out` writable.
enum StStatus st_roc_auc(const size_t *labels,
                         const double *scores,
                         size_t n,
                         size_t k,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLIDETUNE_H */
