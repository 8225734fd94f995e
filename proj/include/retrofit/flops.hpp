// SPDX-License-Identifier: Apache-2.0
//
// Training-FLOP accounting. Fixed-depth models use 6 N D with N the
// non-embedding parameter count. Recurrent models split effective
// parameters into N1 (used with gradients) and N2 (forward only):
//
//   N1 = P + C + min(r, w) (R + A)
//   N2 = max(r - w, 0) (R + A)
//   FLOPs = (6 N1 + 2 N2) D

#pragma once

#include <cstdint>
#include <vector>

#include "retrofit/surgery.hpp"

namespace retrofit {

struct FlopBreakdown {
  double n1 = 0.0;
  double n2 = 0.0;
  double tokens = 0.0;
  double flops = 0.0;
};

FlopBreakdown flops_fixed(double non_embedding_params, double tokens);
FlopBreakdown flops_for_step(const ParamReport& report, double mean_recurrence,
                             std::int64_t window, double tokens);

// Non-embedding effective parameters at test-time recurrence r: P + C + r (R + A).
double effective_parameters(const ParamReport& report, std::int64_t recurrences);

class FlopMeter {
 public:
  void add(const FlopBreakdown& step);
  double cumulative() const { return cumulative_; }
  const std::vector<FlopBreakdown>& steps() const { return steps_; }
  // Restores the running total when resuming; per-step history is not kept.
  void reset(double cumulative) {
    cumulative_ = cumulative;
    steps_.clear();
  }

 private:
  double cumulative_ = 0.0;
  std::vector<FlopBreakdown> steps_;
};

}  // namespace retrofit
