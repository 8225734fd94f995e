// SPDX-License-Identifier: Apache-2.0
//
// Training loop: per optimizer step, advance the depth curriculum and the
// backprop window, sample one recurrence count shared by the whole global
// batch, accumulate micro-batch gradients of the mean next-token loss, clip,
// step the optimizer on the WSD rate, meter FLOPs and log a metrics row.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "retrofit/checkpoint.hpp"
#include "retrofit/config.hpp"
#include "retrofit/data.hpp"
#include "retrofit/flops.hpp"
#include "retrofit/model.hpp"
#include "retrofit/optim.hpp"

namespace retrofit {

using AnyModel = std::variant<FixedModel, RecurrentModel>;

const ModelConfig& model_config(const AnyModel& m);
std::vector<ParamSlot> parameter_slots(AnyModel& m);
Checkpoint to_checkpoint(const AnyModel& m);
AnyModel model_from_checkpoint(const Checkpoint& ckpt);

// Logits for `tokens`; `s0` (recurrent only) is the initial state, one row per token.
Tensor forward_logits(const AnyModel& m, std::span<const std::int32_t> tokens,
                      std::int64_t seq_len, const RecurrenceRun& run, const Tensor& s0);

// Initial state for `sequences` consecutive sequences; sequence i draws from
// its own sub-stream so states do not depend on how a batch is split.
Tensor initial_states(const ModelConfig& cfg, std::int64_t first, std::int64_t sequences,
                      std::int64_t seq_len, const RandomStream& base);

struct StepGradients {
  double loss = 0.0;  // mean over all target tokens of the batch
  std::vector<Tensor> grads;  // aligned with parameter_slots
};

// Gradient of the batch-mean cross-entropy, accumulated over micro batches.
StepGradients accumulate_gradients(const AnyModel& model, const TokenBatch& batch,
                                   std::int64_t micro_batch, const RecurrenceRun& run,
                                   const RandomStream& s0_base);

struct MetricsRow {
  std::int64_t step = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  std::int64_t curriculum_mean = 0;
  std::int64_t sampled_r = 0;
  std::int64_t window = 0;
  std::int64_t tokens_seen = 0;
  double cumulative_flops = 0.0;
  bool nonfinite = false;
};

inline constexpr const char* kMetricsHeader =
    "step,train_loss,lr,curriculum_mean,sampled_r,window,tokens_seen,cumulative_flops,nonfinite";
std::string format_metrics_row(const MetricsRow& row);

// Recurrence count used at `step`: a pure function of (seed, curriculum, step).
std::int64_t recurrence_for_step(const RunConfig& cfg, std::int64_t step);

struct TrainResult {
  std::int64_t steps_completed = 0;
  std::int64_t nonfinite_events = 0;
  std::vector<MetricsRow> rows;  // rows produced by this invocation
  std::filesystem::path output_dir;
  std::filesystem::path metrics_path;
  std::filesystem::path final_checkpoint;
  AnyModel final_model;
};

// Runs `cfg` to completion, writing resolved_config.json, metrics.csv,
// ckpt_step<N>.ckpt at every checkpoint interval (and step 0) and final.ckpt.
// Throws DivergenceError after more than max_nonfinite non-finite steps.
TrainResult train(const RunConfig& cfg);

// Model the run starts from: donor checkpoint or fresh initialization.
AnyModel initial_model(const RunConfig& cfg);

std::filesystem::path interval_checkpoint_path(const std::filesystem::path& dir, std::int64_t step);

}  // namespace retrofit
