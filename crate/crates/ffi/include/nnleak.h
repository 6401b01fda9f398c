#ifndef NNLEAK_H
#define NNLEAK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NnleakStatus {
  NNLEAK_STATUS_OK = 0,
  NNLEAK_STATUS_NULL_POINTER = 1,
  NNLEAK_STATUS_INVALID_UTF8 = 2,
  NNLEAK_STATUS_PARSE = 3,
  NNLEAK_STATUS_INVALID_ARGUMENT = 4,
  NNLEAK_STATUS_ATTACK_FAILED = 5,
  NNLEAK_STATUS_IO = 6,
  NNLEAK_STATUS_BUFFER_TOO_SMALL = 7,
  NNLEAK_STATUS_PANIC = 8,
} NnleakStatus;

/**
 * A parsed network model.
 */
typedef struct NnleakModel NnleakModel;

/**
 * A simulated device answering timing queries for one model.
 */
typedef struct NnleakOracle NnleakOracle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *nnleak_last_error(void);

/**
 * Parse a model from its text form.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum NnleakStatus nnleak_model_parse(const char *text, struct NnleakModel **out);

/**
 * Load a model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum NnleakStatus nnleak_model_load(const char *path, struct NnleakModel **out);

/**
 * Serialize a model. Release the string with [`nnleak_string_free`].
 *
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum NnleakStatus nnleak_model_write(const struct NnleakModel *model, char **out);

/**
 * Input width of the first layer, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t nnleak_model_input_dim(const struct NnleakModel *model);

/**
 * Output width of the last layer, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t nnleak_model_output_dim(const struct NnleakModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void nnleak_model_free(struct NnleakModel *model);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void nnleak_string_free(char *s);

/**
 * Build a device for `model`. `profile` names a builtin cost profile; null
 * selects `atmega-like`. The oracle keeps its own copy of the model.
 *
 * # Safety
 * `model` must be a live handle, `profile` null or a NUL-terminated string,
 * and `out` a writable pointer.
 */
enum NnleakStatus nnleak_oracle_new(const struct NnleakModel *model,
                                    const char *profile,
                                    double sigma,
                                    uint32_t repeats,
                                    uint64_t seed,
                                    struct NnleakOracle **out);

/**
 * # Safety
 * `oracle` must be null or a handle not yet freed.
 */
void nnleak_oracle_free(struct NnleakOracle *oracle);

/**
 * Run one inference. Writes the network outputs to `outputs` and the
 * observed end-to-end latency to `total_cycles`.
 *
 * # Safety
 * `input` must point to `input_len` bytes, `outputs` to `outputs_len`
 * doubles, and `total_cycles` must be writable or null.
 */
enum NnleakStatus nnleak_oracle_infer(const struct NnleakOracle *oracle,
                                      const uint8_t *input,
                                      size_t input_len,
                                      double *outputs,
                                      size_t outputs_len,
                                      double *total_cycles);

/**
 * Recover the device's model from timing queries alone.
 *
 * # Safety
 * `oracle` must be a live handle and `out` a writable pointer.
 */
enum NnleakStatus nnleak_attack_model(const struct NnleakOracle *oracle,
                                      uint64_t seed,
                                      struct NnleakModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NNLEAK_H */
