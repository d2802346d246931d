#ifndef DFP_H
#define DFP_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DfpStatus {
  DFP_STATUS_OK = 0,
  DFP_STATUS_NULL_POINTER = 1,
  DFP_STATUS_INVALID_ARGUMENT = 2,
  DFP_STATUS_SHAPE_MISMATCH = 3,
  DFP_STATUS_OUT_OF_RANGE = 4,
  DFP_STATUS_POLICY = 5,
  DFP_STATUS_IO = 6,
  DFP_STATUS_PANIC = 7,
} DfpStatus;

typedef enum DfpRounding {
  DFP_ROUNDING_NEAREST = 0,
  DFP_ROUNDING_STOCHASTIC = 1,
  DFP_ROUNDING_BIASED = 2,
} DfpRounding;

// A dense FP32 tensor.
typedef struct DfpFloatTensor DfpFloatTensor;

// A shared-exponent integer tensor.
typedef struct DfpTensor DfpTensor;

// Instruction counters of one kernel call.
typedef struct DfpKernelStats {
  uint64_t fma_count;
  uint64_t convert_count;
  uint64_t spill_count;
  uint64_t overflow_count;
} DfpKernelStats;

// Message of the last failed call on this thread, or NULL. Valid until
// the next failing call on the same thread.
const char *dfp_last_error_message(void);

// Copies `len` floats into a new tensor of the given shape.
//
// # Safety
// `data` must point to `len` floats, `shape` to `ndim` sizes and `out` to
// writable storage for one pointer.
enum DfpStatus dfp_float_tensor_new(const float *data,
                                    size_t len,
                                    const size_t *shape,
                                    size_t ndim,
                                    struct DfpFloatTensor **out);

// # Safety
// `t` must be NULL or a handle from this library not yet freed.
void dfp_float_tensor_free(struct DfpFloatTensor *t);

// # Safety
// `t` must be a live handle.
size_t dfp_float_tensor_len(const struct DfpFloatTensor *t);

// Borrowed element pointer, valid while `t` lives.
//
// # Safety
// `t` must be a live handle.
const float *dfp_float_tensor_data(const struct DfpFloatTensor *t);

// # Safety
// `t` must be a live handle.
void dfp_tensor_free(struct DfpTensor *t);

// # Safety
// `t` must be a live handle.
size_t dfp_tensor_len(const struct DfpTensor *t);

// Borrowed element pointer, valid while `t` lives.
//
// # Safety
// `t` must be a live handle.
const int16_t *dfp_tensor_data(const struct DfpTensor *t);

// Shared exponent, 0 for a NULL handle.
//
// # Safety
// `t` must be a live handle.
int32_t dfp_tensor_exponent(const struct DfpTensor *t);

// # Safety
// `t` must be a live handle.
uint32_t dfp_tensor_bits(const struct DfpTensor *t);

// # Safety
// `t` must be a live handle.
size_t dfp_tensor_ndim(const struct DfpTensor *t);

// Borrowed shape pointer (`dfp_tensor_ndim` entries).
//
// # Safety
// `t` must be a live handle.
const size_t *dfp_tensor_shape(const struct DfpTensor *t);

// Quantizes to `bits`-bit integers with one shared exponent. `seed` is
// used only by stochastic rounding.
//
// # Safety
// `input` must be a live handle and `out` writable.
enum DfpStatus dfp_quantize(const struct DfpFloatTensor *input,
                            uint32_t bits,
                            enum DfpRounding rounding,
                            uint64_t seed,
                            uint32_t pre_shift,
                            struct DfpTensor **out);

// # Safety
// `input` must be a live handle and `out` writable.
enum DfpStatus dfp_dequantize(const struct DfpTensor *input, struct DfpFloatTensor **out);

// Longest INT32 chain of `bits`-bit products that cannot overflow.
//
// # Safety
// `out` must be writable.
enum DfpStatus dfp_safe_chain_length(uint32_t bits, uint32_t pre_shift, uint64_t *out);

// `A (M x K) * B (K x N)` with INT32 chains of `icblk` products (0 picks
// the default blocking for a 200-product chain target). `stats` may be
// NULL.
//
// # Safety
// `a` and `b` must be live handles, `out` writable, `stats` NULL or
// writable.
enum DfpStatus dfp_gemm(const struct DfpTensor *a,
                        const struct DfpTensor *b,
                        size_t icblk,
                        struct DfpFloatTensor **out,
                        struct DfpKernelStats *stats);

#endif  /* DFP_H */
