// SPDX-License-Identifier: Apache-2.0
//
// Held-out evaluation over test-time recurrence counts.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "retrofit/data.hpp"
#include "retrofit/train.hpp"

namespace retrofit {

struct EvalOptions {
  std::uint64_t s0_seed = 1234;
  std::int64_t batch_size = 8;  // sequences per forward pass
};

struct EvalResult {
  double loss = 0.0;      // mean next-token cross-entropy over all targets
  double accuracy = 0.0;  // argmax exact match over answer positions (NaN if none)
  std::int64_t answer_tokens = 0;
};

// Fixed models ignore `recurrences`. Every sequence draws its initial state
// from a stream keyed by (s0_seed, sequence index), identical for every r.
EvalResult evaluate(const AnyModel& model, const TokenBatch& data, std::int64_t recurrences,
                    const EvalOptions& opts = {});
double val_loss(const AnyModel& model, const TokenBatch& data, std::int64_t recurrences,
                const EvalOptions& opts = {});

struct SweepRow {
  std::int64_t recurrences = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double effective_params = 0.0;  // non-embedding, counting reuse
  double flop_proxy = 0.0;        // forward FLOPs per token, 2 x effective_params
};

struct SweepResult {
  std::vector<SweepRow> rows;  // sorted by recurrences
  std::uint64_t s0_seed = 0;
  std::int64_t sequences = 0;
};

inline const std::vector<std::int64_t> kDefaultSweep{1, 2, 4, 8, 16, 32};

// Non-embedding effective parameters of a model at recurrence r.
double effective_parameters(const AnyModel& model, std::int64_t recurrences);

SweepResult eval_sweep(const AnyModel& model, const TokenBatch& data,
                       std::vector<std::int64_t> recurrences = kDefaultSweep,
                       const EvalOptions& opts = {});

inline constexpr const char* kSweepHeader = "r,loss,accuracy,effective_params,flop_proxy";
void write_sweep_csv(const std::filesystem::path& path, const SweepResult& result);
nlohmann::json sweep_summary(const SweepResult& result);

}  // namespace retrofit
