#ifndef UPV_H
#define UPV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum UpvStatus {
  UPV_STATUS_OK = 0,
  UPV_STATUS_NULL_POINTER = 1,
  /*
   Bad argument or input data (out-of-vocabulary token, too short, ...).
   */
  UPV_STATUS_INVALID_INPUT = 2,
  UPV_STATUS_IO = 3,
  /*
   Weight file with the wrong magic, version, architecture or layout.
   */
  UPV_STATUS_BAD_WEIGHTS = 4,
  UPV_STATUS_RUNTIME = 5,
  UPV_STATUS_PANIC = 6,
} UpvStatus;

/*
 Opaque network-detector handle, with the config it was trained under.
 */
typedef struct UpvDetector UpvDetector;

/*
 Opaque generator handle.
 */
typedef struct UpvGenerator UpvGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *upv_version(void);

/*
 Copies the calling thread's last error message into `buf` (truncated,
 always NUL-terminated) and returns the full message length in bytes,
 or 0 when there is none.

 # Safety
 `buf` must be null or point to `cap` writable bytes.
 */
size_t upv_last_error(char *buf, size_t cap);

/*
 Loads a generator weight file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum UpvStatus upv_generator_load(const char *path, struct UpvGenerator **out);

/*
 Releases a generator handle. Null is ignored.

 # Safety
 `gen` must come from [`upv_generator_load`] and not be used afterwards.
 */
void upv_generator_free(struct UpvGenerator *gen);

/*
 Window size of the generator, or 0 for a null handle.

 # Safety
 `gen` must be null or a live handle.
 */
size_t upv_generator_window(const struct UpvGenerator *gen);

/*
 Vocabulary size of the generator, or 0 for a null handle.

 # Safety
 `gen` must be null or a live handle.
 */
uint32_t upv_generator_vocab(const struct UpvGenerator *gen);

/*
 Writes one green (1) / red (0) flag per token into `flags`, using
 wrap-around windows for the first `window - 1` tokens.

 # Safety
 `tokens` and `flags` must each point to `len` elements.
 */
enum UpvStatus upv_generator_label(const struct UpvGenerator *gen,
                                   const uint32_t *tokens,
                                   size_t len,
                                   uint8_t *flags);

/*
 Key-based detection with the generator's stored config. Writes the z
 statistic and the verdict (1 watermarked, 0 clean).

 # Safety
 `tokens` must point to `len` ids; the outputs must be valid pointers.
 */
enum UpvStatus upv_detect_key(const struct UpvGenerator *gen,
                              const uint32_t *tokens,
                              size_t len,
                              double *z,
                              uint8_t *watermarked);

/*
 Loads a network-detector weight file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum UpvStatus upv_detector_load(const char *path, struct UpvDetector **out);

/*
 Releases a detector handle. Null is ignored.

 # Safety
 `det` must come from [`upv_detector_load`] and not be used afterwards.
 */
void upv_detector_free(struct UpvDetector *det);

/*
 Window size the detector was trained for, or 0 for a null handle.

 # Safety
 `det` must be null or a live handle.
 */
size_t upv_detector_window(const struct UpvDetector *det);

/*
 Network detection. Writes the detector's score in (0, 1) and the verdict
 (1 when the score is at least 0.5).

 # Safety
 `tokens` must point to `len` ids; the outputs must be valid pointers.
 */
enum UpvStatus upv_detect_network(const struct UpvDetector *det,
                                  const uint32_t *tokens,
                                  size_t len,
                                  double *score,
                                  uint8_t *watermarked);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UPV_H */
