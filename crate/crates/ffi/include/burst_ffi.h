#ifndef BURST_FFI_H
#define BURST_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BurstMethod {
  BURST_METHOD_RING_ATTENTION = 0,
  BURST_METHOD_TENSOR_PARALLEL = 1,
  BURST_METHOD_BURST_ATTENTION = 2,
} BurstMethod;

typedef enum BurstOverlap {
  BURST_OVERLAP_NONE = 0,
  BURST_OVERLAP_DOUBLE_BUFFER = 1,
} BurstOverlap;

/**
 * Outcome of a call.
 */
typedef enum BurstStatus {
  BURST_STATUS_OK = 0,
  BURST_STATUS_NULL_POINTER = 1,
  BURST_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Sequence cannot be split across the devices.
   */
  BURST_STATUS_PARTITION = 3,
  /**
   * A query row has no visible key under the mask.
   */
  BURST_STATUS_FULLY_MASKED_ROW = 4,
  /**
   * Backward requested before forward.
   */
  BURST_STATUS_FORWARD_NOT_RUN = 5,
  /**
   * The simulated ring failed (deadlock or desynchronization).
   */
  BURST_STATUS_RUNTIME = 6,
  BURST_STATUS_PANIC = 7,
} BurstStatus;

/**
 * Opaque simulation state: a partitioned cluster plus its options.
 */
typedef struct BurstEngine BurstEngine;

/**
 * Shape and options of a simulated run.
 */
typedef struct BurstConfig {
  size_t seq_len;
  size_t head_dim;
  /**
   * Independent attention heads (batch times heads).
   */
  size_t heads;
  size_t devices;
  /**
   * Square tile length of the local kernels; 0 runs them untiled.
   */
  size_t tile;
  bool causal;
  /**
   * Pad a sequence that does not split evenly across `devices`.
   */
  bool pad;
  /**
   * Run devices on threads instead of in lock step.
   */
  bool threaded;
  enum BurstOverlap overlap;
} BurstConfig;

/**
 * Per-device traffic of the passes run so far, in elements.
 */
typedef struct BurstCommCounts {
  uint64_t elements_sent_forward;
  uint64_t elements_sent_backward;
  uint64_t ring_steps;
  uint64_t messages_sent;
  uint64_t messages_received;
} BurstCommCounts;

/**
 * Analytical model parameters. `hidden` and `heads_per_device` take their
 * defaults (`heads * head_dim` and `heads / devices`) when 0.
 */
typedef struct BurstModelSpec {
  uint64_t batch;
  uint64_t seq_len;
  uint64_t heads;
  uint64_t head_dim;
  uint64_t hidden;
  double heads_per_device;
  uint64_t ffn_dim;
  uint64_t bits_per_element;
  uint64_t sram_bytes;
} BurstModelSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *burst_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *burst_version(void);

/**
 * Partitions `q`, `k`, `v` (each `heads * seq_len * head_dim` long) across
 * the configured devices and returns a new engine in `*out`. Free it with
 * [`burst_engine_free`].
 *
 * # Safety
 * Pointers must be valid for the given lengths; `out` must be writable.
 */
enum BurstStatus burst_engine_new(const struct BurstConfig *config,
                                  const double *q,
                                  const double *k,
                                  const double *v,
                                  size_t len,
                                  struct BurstEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` must come from [`burst_engine_new`] and not be used afterwards.
 */
void burst_engine_free(struct BurstEngine *engine);

/**
 * Runs the forward ring pass and writes `O` (`heads * seq_len * head_dim`)
 * and the row log-sum-exp (`heads * seq_len`).
 *
 * # Safety
 * `engine` must be live; output pointers valid for the given lengths.
 */
enum BurstStatus burst_engine_forward(struct BurstEngine *engine,
                                      double *o,
                                      size_t o_len,
                                      double *lse,
                                      size_t lse_len);

/**
 * Runs the backward ring pass for output gradient `d_o` and writes
 * `dQ`, `dK`, `dV`. All five buffers are `len` long.
 *
 * # Safety
 * `engine` must be live; pointers valid for `len` doubles.
 */
enum BurstStatus burst_engine_backward(struct BurstEngine *engine,
                                       const double *d_o,
                                       double *dq,
                                       double *dk,
                                       double *dv,
                                       size_t len);

/**
 * Copies the traffic counters of the passes run so far.
 *
 * # Safety
 * `engine` must be live and `out` writable.
 */
enum BurstStatus burst_engine_comm(const struct BurstEngine *engine, struct BurstCommCounts *out);

/**
 * Dense single-device reference forward; same layout as
 * [`burst_engine_forward`]. Only `seq_len`, `head_dim`, `heads` and
 * `causal` of the config are used.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum BurstStatus burst_dense_forward(const struct BurstConfig *config,
                                     const double *q,
                                     const double *k,
                                     const double *v,
                                     size_t len,
                                     double *o,
                                     double *lse,
                                     size_t lse_len);

/**
 * Modeled per-device forward and backward traffic of `method`, in elements.
 *
 * # Safety
 * `spec`, `forward` and `backward` must be valid.
 */
enum BurstStatus burst_cost_communication(const struct BurstModelSpec *spec,
                                          uint64_t devices,
                                          enum BurstMethod method,
                                          uint64_t *forward,
                                          uint64_t *backward);

/**
 * Total modeled runtime of one layer: tensor parallelism when
 * `method` is `TENSOR_PARALLEL`, the overlapped ring otherwise.
 * `t_attn_b` is added to `t_attn_f` for tensor parallelism.
 *
 * # Safety
 * `spec` and `total` must be valid.
 */
enum BurstStatus burst_cost_runtime(const struct BurstModelSpec *spec,
                                    uint64_t devices,
                                    double bandwidth,
                                    enum BurstMethod method,
                                    double t_attn_f,
                                    double t_attn_b,
                                    double t_ffn,
                                    double *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BURST_FFI_H */
