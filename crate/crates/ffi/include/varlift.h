#ifndef VARLIFT_H
#define VARLIFT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum VarliftStatus {
  VARLIFT_STATUS_OK = 0,
  VARLIFT_STATUS_NULL_POINTER = 1,
  VARLIFT_STATUS_INVALID_UTF8 = 2,
  VARLIFT_STATUS_IO = 3,
  VARLIFT_STATUS_MISSING_ARTIFACT = 4,
  VARLIFT_STATUS_SCHEMA = 5,
  VARLIFT_STATUS_TYPE = 6,
  VARLIFT_STATUS_INVALID_INPUT = 7,
  VARLIFT_STATUS_MODEL = 8,
  VARLIFT_STATUS_CONSTRAINT = 9,
  VARLIFT_STATUS_NOT_FOUND = 10,
  VARLIFT_STATUS_INTERNAL = 11,
} VarliftStatus;

// Opaque handle to a loaded model and its vocabularies.
typedef struct VarliftPredictor VarliftPredictor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint and the dataset directory it was trained against.
//
// # Safety
// `checkpoint` and `data_dir` must be NUL-terminated strings and `out` a
// valid pointer. On success `*out` owns a handle for
// [`varlift_predictor_free`].
enum VarliftStatus varlift_predictor_open(const char *checkpoint,
                                          const char *data_dir,
                                          struct VarliftPredictor **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `p` must come from [`varlift_predictor_open`] and not be used afterwards.
void varlift_predictor_free(struct VarliftPredictor *p);

// Predicts types and names. `request` is `{"function": ..., "options": ...}`.
//
// # Safety
// Pointers must be valid; `*out` receives a string for
// [`varlift_string_free`].
enum VarliftStatus varlift_predict(const struct VarliftPredictor *p,
                                   const char *request,
                                   char **out);

// Re-decodes with analyst constraints. `request` adds `"constraints"`.
//
// # Safety
// As for [`varlift_predict`].
enum VarliftStatus varlift_refine(const struct VarliftPredictor *p,
                                  const char *request,
                                  char **out);

// Describes type-library entry `id` as JSON.
//
// # Safety
// As for [`varlift_predict`].
enum VarliftStatus varlift_typelib_entry(const struct VarliftPredictor *p, size_t id, char **out);

// Layout signature of a canonical type string, e.g. `char *` gives
// `Pointer<Primitive_1>`.
//
// # Safety
// `canonical` must be NUL-terminated and `out` valid.
enum VarliftStatus varlift_layout_signature(const char *canonical, char **out);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void varlift_string_free(char *s);

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *varlift_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VARLIFT_H */
