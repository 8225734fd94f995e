// SPDX-License-Identifier: Apache-2.0
//
// Recurrence-depth sampling, mean-depth and backprop-window curricula, and
// the warmup-stable-decay learning-rate schedule.

#pragma once

#include <cstdint>
#include <string>

#include "retrofit/random.hpp"

namespace retrofit {

struct DepthDistribution {
  double mean = 32.0;
  // Standard deviation of the log-rate.
  double spread = 0.5;
};

// r = 1 + Poisson(lambda), log(lambda) ~ Normal(log(mean - 1) - spread^2 / 2, spread^2),
// so E[r] = mean exactly. mean == 1 always yields 1.
std::int64_t sample_recurrence(const DepthDistribution& dist, RandomStream& stream);

enum class CurriculumShape { constant, linear, one_minus_sqrt };

std::string to_string(CurriculumShape shape);
CurriculumShape parse_curriculum_shape(const std::string& text);

struct CurriculumSpec {
  CurriculumShape shape = CurriculumShape::constant;
  std::int64_t target = 32;
  std::int64_t warmup_steps = 0;
  std::int64_t clamp_min = 1;
};

// linear:         ceil(target * step / warmup)
// one_minus_sqrt: ceil(target * (1 - sqrt(1 - step / warmup)))
// Clamped below at clamp_min; equal to target from step >= warmup on.
std::int64_t curriculum_mean(const CurriculumSpec& spec, std::int64_t step);

// The backprop window follows the same curriculum formulas.
using WindowSchedule = CurriculumSpec;
std::int64_t window_at(const WindowSchedule& ws, std::int64_t step);

struct WsdSpec {
  double peak = 1e-3;
  std::int64_t warmup_steps = 0;
  std::int64_t stable_steps = 0;
  std::int64_t decay_steps = 0;
};

double lr_at(const WsdSpec& wsd, std::int64_t step);

}  // namespace retrofit
