// SPDX-License-Identifier: Apache-2.0
//
// Model surgery: build a recurrent model from a fixed-depth donor by
// selecting prelude / recurrent / coda layer subsets, plus parameter
// accounting and block-influence layer scoring.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "retrofit/checkpoint.hpp"
#include "retrofit/model.hpp"
#include "retrofit/random.hpp"

namespace retrofit {

struct PlanTuple {
  std::int64_t prelude = 0;
  std::int64_t recurrent = 0;
  std::int64_t coda = 0;
  friend bool operator==(const PlanTuple&, const PlanTuple&) = default;
};

struct SurgeryPlan {
  PlanTuple tuple;
  std::int64_t donor_depth = 0;
  std::vector<std::int64_t> prelude_layers;
  std::vector<std::int64_t> recurrent_layers;
  std::vector<std::int64_t> coda_layers;

  // Throws PlanError unless lists are sorted, disjoint, in range and match the tuple.
  void validate() const;
  friend bool operator==(const SurgeryPlan&, const SurgeryPlan&) = default;
};

// Prelude = first p layers, coda = last c layers, recurrent block = the r
// layers immediately before the coda. Layers in between are dropped.
SurgeryPlan make_plan(PlanTuple tuple, std::int64_t donor_depth);
SurgeryPlan make_plan(std::int64_t donor_depth, std::vector<std::int64_t> prelude_layers,
                      std::vector<std::int64_t> recurrent_layers,
                      std::vector<std::int64_t> coda_layers);

// "p,r,c" -> tuple.
PlanTuple parse_tuple(const std::string& text);

void to_json(nlohmann::json& j, const SurgeryPlan& p);
void from_json(const nlohmann::json& j, SurgeryPlan& p);
SurgeryPlan read_plan_file(const std::filesystem::path& path);
void write_plan_file(const std::filesystem::path& path, const SurgeryPlan& plan);

enum class AdapterInit { identity_pass, scaled_random };

struct SurgeryOptions {
  AdapterInit adapter_init = AdapterInit::identity_pass;
  // Gaussian noise added to the identity-pass adapter.
  double noise_std = 1e-3;
};

// Kept blocks are copied verbatim. The identity-pass adapter maps [s | e] to
// e exactly (zero on the s half, identity on the e half) before noise.
RecurrentModel apply_surgery(const FixedModel& donor, const SurgeryPlan& plan,
                             const SurgeryOptions& opts, RandomStream& stream);
Checkpoint apply_surgery(const Checkpoint& donor, const SurgeryPlan& plan,
                         const SurgeryOptions& opts, RandomStream& stream);

// The donor restricted to `layers`, applied in the given order.
FixedModel prune_to_layers(const FixedModel& donor, std::span<const std::int64_t> layers);
// All plan layers concatenated in prelude, recurrent, coda order.
std::vector<std::int64_t> kept_layers(const SurgeryPlan& plan);

enum class CountConvention {
  // Per-block weights and norms only; no adapter, no final norm.
  table,
  // Every trainable tensor.
  full,
};

struct ParamReport {
  std::int64_t embeddings = 0;  // input + output matrices (once when tied)
  std::int64_t prelude = 0;
  std::int64_t recurrent_block = 0;
  std::int64_t coda = 0;
  // Always the true count (2h*h) and final norm (h), whatever the convention;
  // `body` includes them only under the full convention.
  std::int64_t adapter = 0;
  std::int64_t final_norm = 0;
  std::int64_t body = 0;
  CountConvention convention = CountConvention::table;
};

std::int64_t block_parameter_count(const ModelConfig& cfg);
ParamReport count_parameters(const ModelConfig& cfg, PlanTuple tuple, CountConvention convention);

struct FixedParamReport {
  std::int64_t embeddings = 0;
  std::int64_t body = 0;  // blocks + final norm
};
FixedParamReport count_fixed_parameters(const ModelConfig& cfg, std::int64_t depth);

// 1 - mean cosine similarity between each block's input and output hidden
// states over the calibration tokens. One score per donor layer.
std::vector<double> block_influence_scores(const FixedModel& donor,
                                           std::span<const std::int32_t> tokens,
                                           std::int64_t seq_len);

// Shapes of public 1B-class donors, for accounting only. Embeddings are
// counted as separate input and output matrices.
struct DonorPreset {
  std::string name;
  ModelConfig config;
  std::int64_t depth = 0;
};
std::vector<std::string> preset_names();
// Throws InputError for an unknown name.
DonorPreset donor_preset(const std::string& name);

}  // namespace retrofit
