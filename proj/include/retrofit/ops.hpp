// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. All matrices are rank-2 row-major
// [rows x cols]; sequences are stored as [batch*seq_len x width].

#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "retrofit/tensor.hpp"

namespace retrofit {

// When enabled, every op verifies its output is finite and throws
// NonFiniteError otherwise. Off by default; tests switch it on.
void set_finite_checks(bool enabled);
bool finite_checks();

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
// x[n x h] + bias[h] on every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor tanh(const Tensor& a);

// silu(gate) * up, elementwise.
Tensor swiglu(const Tensor& gate, const Tensor& up);

// Row-wise RMS normalization with a learned gain of length cols.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);

// Rotary position embedding over `heads` blocks of `head_dim` columns
// (rotate-half pairing). Position of row i is i % seq_len.
Tensor rope(const Tensor& x, std::int64_t seq_len, std::int64_t heads, std::int64_t head_dim,
            double base);

// Causal grouped-query attention; see kernels::AttentionDims.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::int64_t seq_len, std::int64_t q_heads, std::int64_t kv_heads,
                        std::int64_t head_dim);

// [a | b] along columns.
Tensor concat_cols(const Tensor& a, const Tensor& b);

// table[vocab x h] gathered at `tokens` -> [tokens.size() x h].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> tokens);

// Mean next-token cross-entropy over rows of `logits`. With `weights`, the
// result is sum_i w_i * ce_i / sum_i w_i.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::optional<std::span<const double>> weights = std::nullopt);

}  // namespace retrofit
