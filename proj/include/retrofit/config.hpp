// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a JSON file whose keys mirror RunConfig. Missing keys
// take defaults, unknown keys are rejected, and dotted-key overrides
// ("curriculum.target=16") are applied last and type-checked.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "retrofit/data.hpp"
#include "retrofit/model.hpp"
#include "retrofit/optim.hpp"
#include "retrofit/schedules.hpp"
#include "retrofit/surgery.hpp"

namespace retrofit {

enum class ModelKind { fixed, recurrent };

struct ModelSource {
  ModelKind kind = ModelKind::recurrent;
  // Empty: random init with `depth` (fixed) or `plan` (recurrent).
  std::string checkpoint;
  std::int64_t depth = 4;
  PlanTuple plan{1, 2, 1};
  double emb_scale = 1.0;
};

struct RunConfig {
  ModelConfig model_config;
  ModelSource model;
  OptimizerConfig optimizer;
  WsdSpec lr{0.02, 20, 1000000, 0};
  double depth_spread = 0.5;
  CurriculumSpec curriculum{CurriculumShape::constant, 4, 0, 1};
  WindowSchedule window{CurriculumShape::constant, 8, 0, 1};
  std::int64_t micro_batch = 8;
  std::int64_t global_batch = 8;
  std::int64_t total_steps = 100;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  PhaseSpec data;
  std::int64_t checkpoint_interval = 0;  // 0: initial and final only
  std::int64_t max_nonfinite = 10;
  std::string output_dir = "run";
  // "", "latest", or a checkpoint path.
  std::string resume;

  // Throws ConfigError naming the offending key.
  void validate() const;
};

RunConfig default_run_config();
nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

// Defaults <- file contents <- overrides ("dotted.key=value").
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);
RunConfig resolve_config(const nlohmann::json& user, const std::vector<std::string>& overrides);

// Output directory root when a relative output_dir is used.
inline constexpr const char* kOutputRootEnv = "RETROFIT_OUTPUT_ROOT";
std::filesystem::path resolve_output_dir(const RunConfig& cfg);

}  // namespace retrofit
