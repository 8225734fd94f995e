// SPDX-License-Identifier: Apache-2.0

#include "retrofit/flops.hpp"

#include <algorithm>

#include "retrofit/errors.hpp"

namespace retrofit {

FlopBreakdown flops_fixed(double non_embedding_params, double tokens) {
  if (tokens < 0.0) throw ContractError("flops: token count must be non-negative");
  return {non_embedding_params, 0.0, tokens, 6.0 * non_embedding_params * tokens};
}

FlopBreakdown flops_for_step(const ParamReport& report, double mean_recurrence,
                             std::int64_t window, double tokens) {
  if (!(mean_recurrence >= 1.0)) throw ContractError("flops: mean recurrence must be >= 1");
  if (window < 1) throw ContractError("flops: backprop window must be >= 1");
  if (tokens < 0.0) throw ContractError("flops: token count must be non-negative");
  const double w = static_cast<double>(window);
  const double shared = static_cast<double>(report.recurrent_block + report.adapter);
  const double unique = static_cast<double>(report.prelude + report.coda);
  FlopBreakdown b;
  b.n1 = unique + std::min(mean_recurrence, w) * shared;
  b.n2 = std::max(mean_recurrence - w, 0.0) * shared;
  b.tokens = tokens;
  b.flops = (6.0 * b.n1 + 2.0 * b.n2) * tokens;
  return b;
}

double effective_parameters(const ParamReport& report, std::int64_t recurrences) {
  return static_cast<double>(report.prelude + report.coda) +
         static_cast<double>(recurrences) * static_cast<double>(report.recurrent_block + report.adapter);
}

void FlopMeter::add(const FlopBreakdown& step) {
  cumulative_ += step.flops;
  steps_.push_back(step);
}

}  // namespace retrofit
