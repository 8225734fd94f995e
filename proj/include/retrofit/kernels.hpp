// SPDX-License-Identifier: Apache-2.0
//
// Dense compute kernels. Each kernel has a serial reference version and an
// OpenMP version. Both accumulate every output element in the same order,
// so results are bitwise identical for any thread count.
//
// Matrices are row-major. When `accumulate` is set the product is summed
// into a fresh accumulator first and then added to the existing output.

#pragma once

#include <cstdint>

namespace retrofit::kernels {

struct AttentionDims {
  std::int64_t batch;    // independent sequences
  std::int64_t seq_len;  // tokens per sequence
  std::int64_t q_heads;
  std::int64_t kv_heads;
  std::int64_t head_dim;
};

struct KernelSet {
  // c[m x n] = a[m x k] * b[k x n]
  void (*gemm_nn)(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                  std::int64_t n, bool accumulate);
  // c[m x n] = a[m x k] * b[n x k]^T
  void (*gemm_nt)(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                  std::int64_t n, bool accumulate);
  // c[m x n] = a[k x m]^T * b[k x n]
  void (*gemm_tn)(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                  std::int64_t n, bool accumulate);
  // Causal grouped-query attention with 1/sqrt(head_dim) scaling.
  // q, out: [batch*seq, q_heads*head_dim]; k, v: [batch*seq, kv_heads*head_dim];
  // probs (written): [batch, q_heads, seq, seq].
  void (*attention_forward)(const AttentionDims& dims, const double* q, const double* k,
                            const double* v, double* out, double* probs);
  // Accumulates into dq / dk / dv; any of them may be null.
  void (*attention_backward)(const AttentionDims& dims, const double* q, const double* k,
                             const double* v, const double* probs, const double* dout,
                             double* dq, double* dk, double* dv);
};

const KernelSet& serial_kernels();
const KernelSet& parallel_kernels();

enum class Backend { serial, parallel };
void set_backend(Backend backend);
Backend backend();
// Kernel set for the selected backend (parallel by default).
const KernelSet& active();
int max_threads();

}  // namespace retrofit::kernels
