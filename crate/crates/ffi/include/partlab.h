#ifndef PARTLAB_H
#define PARTLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PartlabBleuTokenizer {
  PARTLAB_BLEU_TOKENIZER_CHAR = 0,
  PARTLAB_BLEU_TOKENIZER_WORD13A = 1,
} PartlabBleuTokenizer;

typedef enum PartlabStatus {
  PARTLAB_STATUS_OK = 0,
  PARTLAB_STATUS_NULL_POINTER = 1,
  PARTLAB_STATUS_INVALID_UTF8 = 2,
  PARTLAB_STATUS_INVALID_ARGUMENT = 3,
  PARTLAB_STATUS_CORRUPT_CHECKPOINT = 4,
  PARTLAB_STATUS_IO = 5,
  PARTLAB_STATUS_UNDEFINED_REFERENCE = 6,
  PARTLAB_STATUS_BUFFER_TOO_SMALL = 7,
  PARTLAB_STATUS_PANIC = 8,
  PARTLAB_STATUS_OTHER = 9,
} PartlabStatus;

// Opaque model handle.
typedef struct PartlabModel PartlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *partlab_last_error(void);

// Library version as a static NUL-terminated string.
const char *partlab_version(void);

// Word error rate of one pair.
//
// # Safety
// `reference` and `hypothesis` must be NUL-terminated strings; `out` must
// be valid for a write.
enum PartlabStatus partlab_wer(const char *reference, const char *hypothesis, double *out);

// Character error rate of one pair.
//
// # Safety
// As for [`partlab_wer`].
enum PartlabStatus partlab_cer(const char *reference, const char *hypothesis, double *out);

// Corpus BLEU (0-100) over `n` reference/hypothesis pairs.
//
// # Safety
// `refs` and `hyps` must point to `n` NUL-terminated strings each; `out`
// must be valid for a write.
enum PartlabStatus partlab_bleu(const char *const *refs,
                                const char *const *hyps,
                                size_t n,
                                enum PartlabBleuTokenizer tokenizer,
                                double *out);

// Loads a checkpoint. On success `*out` owns a handle.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for a write.
enum PartlabStatus partlab_model_load(const char *path, struct PartlabModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`partlab_model_load`] and not be used afterwards.
void partlab_model_free(struct PartlabModel *model);

// Feature width expected by [`partlab_model_decode`]; 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t partlab_model_feature_dim(const struct PartlabModel *model);

// Greedy decoding of `frames` x feature_dim row-major features.
// Writes at most `capacity` tokens and the full count to `*out_len`;
// returns `BufferTooSmall` when the count exceeds `capacity`.
//
// # Safety
// `model` must be a live handle, `features` must hold
// `frames * feature_dim` floats and `tokens` must hold `capacity` values.
enum PartlabStatus partlab_model_decode(const struct PartlabModel *model,
                                        const float *features,
                                        size_t frames,
                                        size_t instruction,
                                        size_t max_len,
                                        uint32_t *tokens,
                                        size_t capacity,
                                        size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARTLAB_H */
