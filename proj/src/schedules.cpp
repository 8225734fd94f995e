// SPDX-License-Identifier: Apache-2.0

#include "retrofit/schedules.hpp"

#include <algorithm>
#include <cmath>

#include "retrofit/errors.hpp"

namespace retrofit {

std::int64_t sample_recurrence(const DepthDistribution& dist, RandomStream& stream) {
  if (!(dist.mean >= 1.0)) throw ContractError("sample_recurrence: mean must be >= 1");
  if (!(dist.spread >= 0.0)) throw ContractError("sample_recurrence: spread must be >= 0");
  if (dist.mean == 1.0) return 1;
  const double s = dist.spread;
  const double log_rate = std::log(dist.mean - 1.0) - 0.5 * s * s + s * stream.normal();
  return 1 + static_cast<std::int64_t>(stream.poisson(std::exp(log_rate)));
}

std::string to_string(CurriculumShape shape) {
  switch (shape) {
    case CurriculumShape::constant: return "constant";
    case CurriculumShape::linear: return "linear";
    case CurriculumShape::one_minus_sqrt: return "one-minus-sqrt";
  }
  return "?";
}

CurriculumShape parse_curriculum_shape(const std::string& text) {
  if (text == "constant") return CurriculumShape::constant;
  if (text == "linear") return CurriculumShape::linear;
  if (text == "one-minus-sqrt" || text == "1-sqrt") return CurriculumShape::one_minus_sqrt;
  throw ConfigError("unknown curriculum shape '" + text + "'");
}

std::int64_t curriculum_mean(const CurriculumSpec& spec, std::int64_t step) {
  if (step < 0) throw ContractError("curriculum: step must be non-negative");
  if (spec.shape == CurriculumShape::constant || step >= spec.warmup_steps) {
    return std::max(spec.target, spec.clamp_min);
  }
  std::int64_t raw = 0;
  if (spec.shape == CurriculumShape::linear) {
    // Integer ceil-division keeps exact multiples exact.
    const std::int64_t num = spec.target * step;
    raw = (num + spec.warmup_steps - 1) / spec.warmup_steps;
  } else {
    const double frac = static_cast<double>(step) / static_cast<double>(spec.warmup_steps);
    raw = static_cast<std::int64_t>(
        std::ceil(static_cast<double>(spec.target) * (1.0 - std::sqrt(1.0 - frac))));
  }
  return std::clamp(raw, spec.clamp_min, std::max(spec.target, spec.clamp_min));
}

std::int64_t window_at(const WindowSchedule& ws, std::int64_t step) {
  return std::max<std::int64_t>(curriculum_mean(ws, step), 1);
}

double lr_at(const WsdSpec& wsd, std::int64_t step) {
  if (step < 0) throw ContractError("lr schedule: step must be non-negative");
  if (step < wsd.warmup_steps) {
    return wsd.peak * static_cast<double>(step) / static_cast<double>(wsd.warmup_steps);
  }
  const std::int64_t into_decay = step - wsd.warmup_steps - wsd.stable_steps;
  if (into_decay < 0) return wsd.peak;
  if (wsd.decay_steps <= 0 || into_decay >= wsd.decay_steps) {
    return wsd.decay_steps <= 0 ? wsd.peak : 0.0;
  }
  return wsd.peak * (1.0 - static_cast<double>(into_decay) / static_cast<double>(wsd.decay_steps));
}

}  // namespace retrofit
