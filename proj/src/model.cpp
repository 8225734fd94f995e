// SPDX-License-Identifier: Apache-2.0

#include "retrofit/model.hpp"

#include <algorithm>
#include <cmath>

#include "retrofit/errors.hpp"
#include "retrofit/ops.hpp"

namespace retrofit {

void ModelConfig::validate() const {
  if (vocab_size < 1 || hidden < 1 || n_heads < 1 || n_kv_heads < 1 || head_dim < 1 || ffn < 1) {
    throw ContractError("model config: extents must be positive");
  }
  if (hidden != n_heads * head_dim) {
    throw ContractError("model config: hidden must equal n_heads * head_dim");
  }
  if (n_heads % n_kv_heads != 0) {
    throw ContractError("model config: n_heads must be divisible by n_kv_heads");
  }
  if (head_dim % 2 != 0) throw ContractError("model config: head_dim must be even for rotary");
  if (context_length < 1) throw ContractError("model config: context_length must be >= 1");
  if (!(norm_eps > 0.0) || !(rope_base > 0.0) || !(sigma_s0 >= 0.0)) {
    throw ContractError("model config: norm_eps, rope_base must be positive and sigma_s0 >= 0");
  }
}

std::int64_t RecurrenceRun::untracked() const {
  return recurrences - std::min(recurrences, window);
}

Tensor decoder_block(const Tensor& x, const BlockWeights& bw, const ModelConfig& cfg,
                     std::int64_t seq_len) {
  if (seq_len < 1 || seq_len > cfg.context_length) {
    throw ContractError("decoder_block: sequence length " + std::to_string(seq_len) +
                        " exceeds context length " + std::to_string(cfg.context_length));
  }
  auto attention = [&](const Tensor& in) {
    Tensor q = matmul(in, bw.wq);
    Tensor k = matmul(in, bw.wk);
    Tensor v = matmul(in, bw.wv);
    if (cfg.qk_norm) {
      q = rmsnorm(q, bw.q_norm, cfg.norm_eps);
      k = rmsnorm(k, bw.k_norm, cfg.norm_eps);
    }
    q = rope(q, seq_len, cfg.n_heads, cfg.head_dim, cfg.rope_base);
    k = rope(k, seq_len, cfg.n_kv_heads, cfg.head_dim, cfg.rope_base);
    Tensor att = causal_attention(q, k, v, seq_len, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
    return matmul(att, bw.wo);
  };
  auto mlp = [&](const Tensor& in) {
    return matmul(swiglu(matmul(in, bw.w_gate), matmul(in, bw.w_up)), bw.w_down);
  };
  if (cfg.post_norm) {
    Tensor h = add(x, rmsnorm(attention(x), bw.attn_norm, cfg.norm_eps));
    return add(h, rmsnorm(mlp(h), bw.mlp_norm, cfg.norm_eps));
  }
  Tensor h = add(x, attention(rmsnorm(x, bw.attn_norm, cfg.norm_eps)));
  return add(h, mlp(rmsnorm(h, bw.mlp_norm, cfg.norm_eps)));
}

namespace {

void check_tokens(std::span<const std::int32_t> tokens, std::int64_t seq_len) {
  if (tokens.empty() || seq_len < 1 || static_cast<std::int64_t>(tokens.size()) % seq_len != 0) {
    throw InputError("token count must be a positive multiple of the sequence length");
  }
}

Tensor unembed(const ModelConfig& cfg, const Tensor& x, const Tensor& final_norm,
               const Tensor& embedding, const Tensor& unembedding) {
  Tensor normed = rmsnorm(x, final_norm, cfg.norm_eps);
  return cfg.tie_embeddings ? matmul_nt(normed, embedding) : matmul(normed, unembedding);
}

}  // namespace

Tensor forward_fixed(const FixedModel& model, std::span<const std::int32_t> tokens,
                     std::int64_t seq_len) {
  check_tokens(tokens, seq_len);
  Tensor x = embedding(model.embedding, tokens);
  for (const auto& block : model.blocks) x = decoder_block(x, block, model.config, seq_len);
  return unembed(model.config, x, model.final_norm, model.embedding, model.unembedding);
}

Tensor sample_initial_state(const ModelConfig& cfg, std::int64_t rows, RandomStream& stream) {
  return draw_normal(stream, {rows, cfg.hidden}, 0.0, cfg.sigma_s0);
}

Tensor prelude_forward(const RecurrentModel& model, std::span<const std::int32_t> tokens,
                       std::int64_t seq_len) {
  check_tokens(tokens, seq_len);
  Tensor x = embedding(model.embedding, tokens);
  for (const auto& block : model.prelude) x = decoder_block(x, block, model.config, seq_len);
  return x;
}

Tensor recurrent_step(const RecurrentModel& model, const Tensor& state, const Tensor& injected,
                      std::int64_t seq_len) {
  Tensor x = matmul(concat_cols(state, injected), model.adapter);
  for (const auto& block : model.recurrent) x = decoder_block(x, block, model.config, seq_len);
  return x;
}

Tensor coda_forward(const RecurrentModel& model, const Tensor& state, std::int64_t seq_len) {
  Tensor x = state;
  for (const auto& block : model.coda) x = decoder_block(x, block, model.config, seq_len);
  return unembed(model.config, x, model.final_norm, model.embedding, model.unembedding);
}

Tensor forward_recurrent(const RecurrentModel& model, std::span<const std::int32_t> tokens,
                         std::int64_t seq_len, const RecurrenceRun& run, RandomStream& s0_stream) {
  if (run.recurrences < 1) throw ContractError("forward_recurrent: recurrences must be >= 1");
  if (run.window < 1) throw ContractError("forward_recurrent: backprop window must be >= 1");
  Tensor s0 = sample_initial_state(model.config, static_cast<std::int64_t>(tokens.size()), s0_stream);
  return forward_recurrent(model, tokens, seq_len, run, s0);
}

Tensor forward_recurrent(const RecurrentModel& model, std::span<const std::int32_t> tokens,
                         std::int64_t seq_len, const RecurrenceRun& run, const Tensor& s0) {
  if (run.recurrences < 1) throw ContractError("forward_recurrent: recurrences must be >= 1");
  if (run.window < 1) throw ContractError("forward_recurrent: backprop window must be >= 1");
  const Tensor e = prelude_forward(model, tokens, seq_len);
  if (s0.shape() != e.shape()) throw ShapeError("forward_recurrent: initial state shape mismatch");
  Tensor s = detach(s0);
  const std::int64_t untracked = run.untracked();
  if (untracked > 0) {
    NoGradScope no_grad;
    for (std::int64_t i = 0; i < untracked; ++i) s = recurrent_step(model, s, e, seq_len);
  }
  s = detach(s);
  for (std::int64_t i = untracked; i < run.recurrences; ++i) s = recurrent_step(model, s, e, seq_len);
  return coda_forward(model, s, seq_len);
}

// ---------------------------------------------------------------------------
// Initialization

double default_init_std(const ModelConfig& cfg) {
  return std::sqrt(2.0 / (5.0 * static_cast<double>(cfg.hidden)));
}

namespace {

BlockWeights init_block(const ModelConfig& cfg, RandomStream& stream, double std,
                        double out_std) {
  const auto h = cfg.hidden, kv = cfg.kv_width(), f = cfg.ffn;
  BlockWeights b;
  b.wq = draw_normal(stream, {h, h}, 0.0, std);
  b.wk = draw_normal(stream, {h, kv}, 0.0, std);
  b.wv = draw_normal(stream, {h, kv}, 0.0, std);
  b.wo = draw_normal(stream, {h, h}, 0.0, out_std);
  b.w_gate = draw_normal(stream, {h, f}, 0.0, std);
  b.w_up = draw_normal(stream, {h, f}, 0.0, std);
  b.w_down = draw_normal(stream, {f, h}, 0.0, out_std);
  b.attn_norm = Tensor::full({h}, 1.0);
  b.mlp_norm = Tensor::full({h}, 1.0);
  if (cfg.qk_norm) {
    b.q_norm = Tensor::full({h}, 1.0);
    b.k_norm = Tensor::full({kv}, 1.0);
  }
  return b;
}

struct InitScales {
  double std;
  double out_std;
};

InitScales scales(const ModelConfig& cfg, const InitOptions& opts, double effective_depth) {
  if (!(opts.emb_scale > 0.0)) throw ContractError("init: emb_scale must be positive");
  const double std = opts.base_std > 0.0 ? opts.base_std : default_init_std(cfg);
  return {std, std / std::sqrt(2.0 * std::max(effective_depth, 1.0))};
}

std::vector<BlockWeights> init_blocks(const ModelConfig& cfg, RandomStream& stream,
                                      std::string_view part, std::int64_t count, InitScales s) {
  std::vector<BlockWeights> out;
  for (std::int64_t i = 0; i < count; ++i) {
    auto sub = stream.fork(part, static_cast<std::uint64_t>(i));
    out.push_back(init_block(cfg, sub, s.std, s.out_std));
  }
  return out;
}

}  // namespace

FixedModel init_fixed(const ModelConfig& cfg, std::int64_t depth, RandomStream& stream,
                      const InitOptions& opts) {
  cfg.validate();
  const auto s = scales(cfg, opts, static_cast<double>(depth));
  FixedModel m;
  m.config = cfg;
  auto emb = stream.fork("embedding");
  m.embedding = draw_normal(emb, {cfg.vocab_size, cfg.hidden}, 0.0, s.std * opts.emb_scale);
  m.blocks = init_blocks(cfg, stream, "blocks", depth, s);
  m.final_norm = Tensor::full({cfg.hidden}, 1.0);
  if (!cfg.tie_embeddings) {
    auto un = stream.fork("unembedding");
    m.unembedding = draw_normal(un, {cfg.hidden, cfg.vocab_size}, 0.0, s.std);
  }
  return m;
}

RecurrentModel init_scaled(const ModelConfig& cfg, std::int64_t prelude, std::int64_t recurrent,
                           std::int64_t coda, RandomStream& stream, const InitOptions& opts) {
  cfg.validate();
  const double depth = static_cast<double>(prelude + coda) +
                       static_cast<double>(recurrent) * std::max(opts.mean_recurrence, 1.0);
  const auto s = scales(cfg, opts, depth);
  RecurrentModel m;
  m.config = cfg;
  auto emb = stream.fork("embedding");
  m.embedding = draw_normal(emb, {cfg.vocab_size, cfg.hidden}, 0.0, s.std * opts.emb_scale);
  m.prelude = init_blocks(cfg, stream, "prelude", prelude, s);
  auto ad = stream.fork("adapter");
  m.adapter = draw_normal(ad, {2 * cfg.hidden, cfg.hidden}, 0.0, s.std);
  m.recurrent = init_blocks(cfg, stream, "recurrent", recurrent, s);
  m.coda = init_blocks(cfg, stream, "coda", coda, s);
  m.final_norm = Tensor::full({cfg.hidden}, 1.0);
  if (!cfg.tie_embeddings) {
    auto un = stream.fork("unembedding");
    m.unembedding = draw_normal(un, {cfg.hidden, cfg.vocab_size}, 0.0, s.std);
  }
  return m;
}

}  // namespace retrofit
