// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer blocks and both model forms: a fixed-depth stack
// and the prelude / recurrent block / coda form with input injection.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "retrofit/random.hpp"
#include "retrofit/tensor.hpp"

namespace retrofit {

struct ModelConfig {
  std::int64_t vocab_size = 257;
  std::int64_t hidden = 64;
  std::int64_t n_heads = 4;
  std::int64_t n_kv_heads = 2;
  std::int64_t head_dim = 16;
  std::int64_t ffn = 128;
  std::int64_t context_length = 1024;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double sigma_s0 = 0.02;
  bool tie_embeddings = false;
  // OLMo-style conventions.
  bool qk_norm = false;
  bool post_norm = false;

  std::int64_t kv_width() const { return n_kv_heads * head_dim; }
  // Throws ContractError on inconsistent extents.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct BlockWeights {
  Tensor wq, wk, wv, wo;        // [h x h], [h x kv], [h x kv], [h x h]
  Tensor w_gate, w_up, w_down;  // [h x ffn], [h x ffn], [ffn x h]
  Tensor attn_norm, mlp_norm;   // [h]
  Tensor q_norm, k_norm;        // [h], [kv]; only with qk_norm
};

enum class ParamRole { matrix, vector, embedding };

struct FixedModel {
  ModelConfig config;
  Tensor embedding;  // [vocab x h]
  std::vector<BlockWeights> blocks;
  Tensor final_norm;
  Tensor unembedding;  // [h x vocab]; undefined when tied
};

struct RecurrentModel {
  ModelConfig config;
  Tensor embedding;
  std::vector<BlockWeights> prelude;
  Tensor adapter;  // [2h x h]; input is [s | e]
  std::vector<BlockWeights> recurrent;
  std::vector<BlockWeights> coda;
  Tensor final_norm;
  Tensor unembedding;
};

struct RecurrenceRun {
  std::int64_t recurrences = 1;
  std::int64_t window = 8;
  // Iterations run without gradient before the tracked tail.
  std::int64_t untracked() const;
};

template <typename F>
void for_each_block_param(const std::string& prefix, BlockWeights& b, bool qk_norm, F&& f) {
  f(prefix + "wq", b.wq, ParamRole::matrix);
  f(prefix + "wk", b.wk, ParamRole::matrix);
  f(prefix + "wv", b.wv, ParamRole::matrix);
  f(prefix + "wo", b.wo, ParamRole::matrix);
  f(prefix + "w_gate", b.w_gate, ParamRole::matrix);
  f(prefix + "w_up", b.w_up, ParamRole::matrix);
  f(prefix + "w_down", b.w_down, ParamRole::matrix);
  f(prefix + "attn_norm", b.attn_norm, ParamRole::vector);
  f(prefix + "mlp_norm", b.mlp_norm, ParamRole::vector);
  if (qk_norm) {
    f(prefix + "q_norm", b.q_norm, ParamRole::vector);
    f(prefix + "k_norm", b.k_norm, ParamRole::vector);
  }
}

// Visits every trainable tensor with a stable name, in a fixed order.
template <typename F>
void for_each_parameter(FixedModel& m, F&& f) {
  f(std::string("embedding"), m.embedding, ParamRole::embedding);
  for (std::size_t i = 0; i < m.blocks.size(); ++i)
    for_each_block_param("blocks." + std::to_string(i) + ".", m.blocks[i], m.config.qk_norm, f);
  f(std::string("final_norm"), m.final_norm, ParamRole::vector);
  if (!m.config.tie_embeddings) f(std::string("unembedding"), m.unembedding, ParamRole::embedding);
}

template <typename F>
void for_each_parameter(RecurrentModel& m, F&& f) {
  f(std::string("embedding"), m.embedding, ParamRole::embedding);
  for (std::size_t i = 0; i < m.prelude.size(); ++i)
    for_each_block_param("prelude." + std::to_string(i) + ".", m.prelude[i], m.config.qk_norm, f);
  f(std::string("adapter"), m.adapter, ParamRole::matrix);
  for (std::size_t i = 0; i < m.recurrent.size(); ++i)
    for_each_block_param("recurrent." + std::to_string(i) + ".", m.recurrent[i], m.config.qk_norm,
                         f);
  for (std::size_t i = 0; i < m.coda.size(); ++i)
    for_each_block_param("coda." + std::to_string(i) + ".", m.coda[i], m.config.qk_norm, f);
  f(std::string("final_norm"), m.final_norm, ParamRole::vector);
  if (!m.config.tie_embeddings) f(std::string("unembedding"), m.unembedding, ParamRole::embedding);
}

// Copy of `m` whose parameters are leaves on `tape`.
template <typename Model>
Model watch_parameters(Model m, Tape& tape) {
  for_each_parameter(m, [&](const std::string&, Tensor& t, ParamRole) { t = tape.watch(t); });
  return m;
}

// Pre-norm block: x + Attn(norm(x)), then + MLP(norm(.)). With post_norm:
// x + norm(Attn(x)), then + norm(MLP(.)). x is [batch*seq_len x h].
Tensor decoder_block(const Tensor& x, const BlockWeights& bw, const ModelConfig& cfg,
                     std::int64_t seq_len);

// Logits [tokens.size() x vocab]; tokens hold tokens.size()/seq_len sequences.
Tensor forward_fixed(const FixedModel& model, std::span<const std::int32_t> tokens,
                     std::int64_t seq_len);

Tensor sample_initial_state(const ModelConfig& cfg, std::int64_t rows, RandomStream& stream);

// Pieces of the recurrent forward pass, exposed for oracles and evaluation.
Tensor prelude_forward(const RecurrentModel& model, std::span<const std::int32_t> tokens,
                       std::int64_t seq_len);
// One application of R: adapter([state | injected]) followed by the recurrent blocks.
Tensor recurrent_step(const RecurrentModel& model, const Tensor& state, const Tensor& injected,
                      std::int64_t seq_len);
Tensor coda_forward(const RecurrentModel& model, const Tensor& state, std::int64_t seq_len);

// e = P(x); s_0 ~ N(0, sigma^2); s_i = R(e, s_{i-1}) for i = 1..r; logits = C(s_r).
// The first r - min(r, w) iterations are computed without gradient tracking.
Tensor forward_recurrent(const RecurrentModel& model, std::span<const std::int32_t> tokens,
                         std::int64_t seq_len, const RecurrenceRun& run, RandomStream& s0_stream);
// Same, with an explicit initial state [tokens.size() x h].
Tensor forward_recurrent(const RecurrentModel& model, std::span<const std::int32_t> tokens,
                         std::int64_t seq_len, const RecurrenceRun& run, const Tensor& s0);

struct InitOptions {
  double emb_scale = 1.0;
  // Expected recurrence used for the effective depth of the output-projection scaling.
  double mean_recurrence = 1.0;
  // Defaults to sqrt(2 / (5h)).
  double base_std = 0.0;
};

double default_init_std(const ModelConfig& cfg);

FixedModel init_fixed(const ModelConfig& cfg, std::int64_t depth, RandomStream& stream,
                      const InitOptions& opts = {});
RecurrentModel init_scaled(const ModelConfig& cfg, std::int64_t prelude, std::int64_t recurrent,
                           std::int64_t coda, RandomStream& stream, const InitOptions& opts = {});

}  // namespace retrofit
