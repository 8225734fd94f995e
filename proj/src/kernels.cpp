// SPDX-License-Identifier: Apache-2.0

#include "retrofit/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <vector>

namespace retrofit::kernels {
namespace {

inline void store(double* c, double acc, bool accumulate) { *c = accumulate ? *c + acc : acc; }

// ---------------------------------------------------------------------------
// Serial reference: textbook loops, one scalar accumulator per element.

void serial_gemm_nn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      store(&c[i * n + j], acc, accumulate);
    }
  }
}

void serial_gemm_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      store(&c[i * n + j], acc, accumulate);
    }
  }
}

void serial_gemm_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
      store(&c[i * n + j], acc, accumulate);
    }
  }
}

// ---------------------------------------------------------------------------
// Parallel versions: rows of the output are split across threads and the
// inner loops are reordered so the innermost loop runs over contiguous
// memory. Per-element summation order is still p = 0, 1, ..., k-1.

void parallel_gemm_nn(const double* a, const double* b, double* c, std::int64_t m,
                      std::int64_t k, std::int64_t n, bool accumulate) {
#pragma omp parallel
  {
    std::vector<double> row(static_cast<std::size_t>(n));
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) {
      std::fill(row.begin(), row.end(), 0.0);
      double* acc = row.data();
      for (std::int64_t p = 0; p < k; ++p) {
        const double aip = a[i * k + p];
        const double* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) acc[j] += aip * brow[j];
      }
      for (std::int64_t j = 0; j < n; ++j) store(&c[i * n + j], acc[j], accumulate);
    }
  }
}

void parallel_gemm_nt(const double* a, const double* b, double* c, std::int64_t m,
                      std::int64_t k, std::int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      store(&c[i * n + j], acc, accumulate);
    }
  }
}

void parallel_gemm_tn(const double* a, const double* b, double* c, std::int64_t m,
                      std::int64_t k, std::int64_t n, bool accumulate) {
#pragma omp parallel
  {
    std::vector<double> row(static_cast<std::size_t>(n));
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) {
      std::fill(row.begin(), row.end(), 0.0);
      double* acc = row.data();
      for (std::int64_t p = 0; p < k; ++p) {
        const double api = a[p * m + i];
        const double* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) acc[j] += api * brow[j];
      }
      for (std::int64_t j = 0; j < n; ++j) store(&c[i * n + j], acc[j], accumulate);
    }
  }
}

// ---------------------------------------------------------------------------
// Attention. Work is split by (sequence, kv-head) group: a group owns the
// q-head columns that share its k/v head, so backward accumulation into dk
// and dv never crosses groups.

void attention_group_forward(const AttentionDims& d, std::int64_t b, std::int64_t g,
                             const double* q, const double* k, const double* v, double* out,
                             double* probs) {
  const std::int64_t n = d.seq_len;
  const std::int64_t hd = d.head_dim;
  const std::int64_t qw = d.q_heads * hd;
  const std::int64_t kw = d.kv_heads * hd;
  const std::int64_t per_group = d.q_heads / d.kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> scores(static_cast<std::size_t>(n));
  for (std::int64_t h = g * per_group; h < (g + 1) * per_group; ++h) {
    double* p_head = probs + (b * d.q_heads + h) * n * n;
    for (std::int64_t i = 0; i < n; ++i) {
      const double* qi = q + (b * n + i) * qw + h * hd;
      double mx = -INFINITY;
      for (std::int64_t j = 0; j <= i; ++j) {
        const double* kj = k + (b * n + j) * kw + g * hd;
        double s = 0.0;
        for (std::int64_t t = 0; t < hd; ++t) s += qi[t] * kj[t];
        scores[j] = s * scale;
        mx = std::max(mx, scores[j]);
      }
      double denom = 0.0;
      for (std::int64_t j = 0; j <= i; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        denom += scores[j];
      }
      double* prow = p_head + i * n;
      for (std::int64_t j = 0; j < n; ++j) prow[j] = j <= i ? scores[j] / denom : 0.0;
      double* oi = out + (b * n + i) * qw + h * hd;
      for (std::int64_t t = 0; t < hd; ++t) oi[t] = 0.0;
      for (std::int64_t j = 0; j <= i; ++j) {
        const double* vj = v + (b * n + j) * kw + g * hd;
        const double pij = prow[j];
        for (std::int64_t t = 0; t < hd; ++t) oi[t] += pij * vj[t];
      }
    }
  }
}

void attention_group_backward(const AttentionDims& d, std::int64_t b, std::int64_t g,
                              const double* q, const double* k, const double* v,
                              const double* probs, const double* dout, double* dq, double* dk,
                              double* dv) {
  const std::int64_t n = d.seq_len;
  const std::int64_t hd = d.head_dim;
  const std::int64_t qw = d.q_heads * hd;
  const std::int64_t kw = d.kv_heads * hd;
  const std::int64_t per_group = d.q_heads / d.kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> dp(static_cast<std::size_t>(n));
  for (std::int64_t h = g * per_group; h < (g + 1) * per_group; ++h) {
    const double* p_head = probs + (b * d.q_heads + h) * n * n;
    for (std::int64_t i = 0; i < n; ++i) {
      const double* prow = p_head + i * n;
      const double* doi = dout + (b * n + i) * qw + h * hd;
      const double* qi = q + (b * n + i) * qw + h * hd;
      double dot = 0.0;
      for (std::int64_t j = 0; j <= i; ++j) {
        const double* vj = v + (b * n + j) * kw + g * hd;
        double s = 0.0;
        for (std::int64_t t = 0; t < hd; ++t) s += doi[t] * vj[t];
        dp[j] = s;
        dot += prow[j] * s;
        if (dv) {
          double* dvj = dv + (b * n + j) * kw + g * hd;
          for (std::int64_t t = 0; t < hd; ++t) dvj[t] += prow[j] * doi[t];
        }
      }
      double* dqi = dq ? dq + (b * n + i) * qw + h * hd : nullptr;
      for (std::int64_t j = 0; j <= i; ++j) {
        const double ds = prow[j] * (dp[j] - dot) * scale;
        const double* kj = k + (b * n + j) * kw + g * hd;
        if (dqi) {
          for (std::int64_t t = 0; t < hd; ++t) dqi[t] += ds * kj[t];
        }
        if (dk) {
          double* dkj = dk + (b * n + j) * kw + g * hd;
          for (std::int64_t t = 0; t < hd; ++t) dkj[t] += ds * qi[t];
        }
      }
    }
  }
}

void serial_attention_forward(const AttentionDims& d, const double* q, const double* k,
                              const double* v, double* out, double* probs) {
  for (std::int64_t b = 0; b < d.batch; ++b)
    for (std::int64_t g = 0; g < d.kv_heads; ++g)
      attention_group_forward(d, b, g, q, k, v, out, probs);
}

void serial_attention_backward(const AttentionDims& d, const double* q, const double* k,
                               const double* v, const double* probs, const double* dout,
                               double* dq, double* dk, double* dv) {
  for (std::int64_t b = 0; b < d.batch; ++b)
    for (std::int64_t g = 0; g < d.kv_heads; ++g)
      attention_group_backward(d, b, g, q, k, v, probs, dout, dq, dk, dv);
}

void parallel_attention_forward(const AttentionDims& d, const double* q, const double* k,
                                const double* v, double* out, double* probs) {
  const std::int64_t groups = d.batch * d.kv_heads;
#pragma omp parallel for schedule(static)
  for (std::int64_t idx = 0; idx < groups; ++idx)
    attention_group_forward(d, idx / d.kv_heads, idx % d.kv_heads, q, k, v, out, probs);
}

void parallel_attention_backward(const AttentionDims& d, const double* q, const double* k,
                                 const double* v, const double* probs, const double* dout,
                                 double* dq, double* dk, double* dv) {
  const std::int64_t groups = d.batch * d.kv_heads;
#pragma omp parallel for schedule(static)
  for (std::int64_t idx = 0; idx < groups; ++idx)
    attention_group_backward(d, idx / d.kv_heads, idx % d.kv_heads, q, k, v, probs, dout, dq, dk,
                             dv);
}

constexpr KernelSet kSerial{serial_gemm_nn, serial_gemm_nt, serial_gemm_tn,
                            serial_attention_forward, serial_attention_backward};
constexpr KernelSet kParallel{parallel_gemm_nn, parallel_gemm_nt, parallel_gemm_tn,
                              parallel_attention_forward, parallel_attention_backward};

std::atomic<Backend> g_backend{Backend::parallel};

}  // namespace

const KernelSet& serial_kernels() { return kSerial; }
const KernelSet& parallel_kernels() { return kParallel; }

void set_backend(Backend backend) { g_backend.store(backend); }
Backend backend() { return g_backend.load(); }
const KernelSet& active() { return backend() == Backend::serial ? kSerial : kParallel; }
int max_threads() { return omp_get_max_threads(); }

}  // namespace retrofit::kernels
