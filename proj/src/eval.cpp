// SPDX-License-Identifier: Apache-2.0

#include "retrofit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "retrofit/errors.hpp"
#include "retrofit/flops.hpp"
#include "retrofit/surgery.hpp"

namespace retrofit {

EvalResult evaluate(const AnyModel& model, const TokenBatch& data, std::int64_t recurrences,
                    const EvalOptions& opts) {
  if (recurrences < 1) throw ContractError("evaluate: recurrences must be >= 1");
  if (opts.batch_size < 1) throw ContractError("evaluate: batch_size must be >= 1");
  NoGradScope no_grad;
  const auto& cfg = model_config(model);
  const bool recurrent = std::holds_alternative<RecurrentModel>(model);
  const RandomStream s0_base(opts.s0_seed, "eval-s0");
  const RecurrenceRun run{recurrences, 1};
  const auto vocab = cfg.vocab_size;

  double nll = 0.0;
  std::int64_t hits = 0, answers = 0;
  for (std::int64_t first = 0; first < data.batch; first += opts.batch_size) {
    const auto count = std::min(opts.batch_size, data.batch - first);
    const TokenBatch mb = slice_batch(data, first, count);
    const Tensor s0 = recurrent ? initial_states(cfg, first, count, mb.seq_len, s0_base) : Tensor();
    const Tensor logits = forward_logits(model, mb.inputs, mb.seq_len, run, s0);
    const auto l = logits.data();
    for (std::size_t row = 0; row < mb.targets.size(); ++row) {
      const double* z = l.data() + row * static_cast<std::size_t>(vocab);
      const double zmax = *std::max_element(z, z + vocab);
      double sum = 0.0;
      for (std::int64_t v = 0; v < vocab; ++v) sum += std::exp(z[v] - zmax);
      const auto t = mb.targets[row];
      nll += std::log(sum) + zmax - z[t];
      if (mb.answer_mask[row] > 0.0) {
        ++answers;
        if (std::max_element(z, z + vocab) - z == t) ++hits;
      }
    }
  }
  EvalResult r;
  r.loss = nll / static_cast<double>(data.batch * data.seq_len);
  r.answer_tokens = answers;
  r.accuracy = answers > 0 ? static_cast<double>(hits) / static_cast<double>(answers)
                           : std::numeric_limits<double>::quiet_NaN();
  return r;
}

double val_loss(const AnyModel& model, const TokenBatch& data, std::int64_t recurrences,
                const EvalOptions& opts) {
  return evaluate(model, data, recurrences, opts).loss;
}

double effective_parameters(const AnyModel& model, std::int64_t recurrences) {
  const auto& cfg = model_config(model);
  if (const auto* fixed = std::get_if<FixedModel>(&model)) {
    return static_cast<double>(
        count_fixed_parameters(cfg, static_cast<std::int64_t>(fixed->blocks.size())).body);
  }
  const auto& rm = std::get<RecurrentModel>(model);
  const PlanTuple tuple{static_cast<std::int64_t>(rm.prelude.size()),
                        static_cast<std::int64_t>(rm.recurrent.size()),
                        static_cast<std::int64_t>(rm.coda.size())};
  return effective_parameters(count_parameters(cfg, tuple, CountConvention::table), recurrences);
}

SweepResult eval_sweep(const AnyModel& model, const TokenBatch& data,
                       std::vector<std::int64_t> recurrences, const EvalOptions& opts) {
  if (recurrences.empty()) throw ContractError("eval_sweep: empty recurrence list");
  std::sort(recurrences.begin(), recurrences.end());
  recurrences.erase(std::unique(recurrences.begin(), recurrences.end()), recurrences.end());
  SweepResult out;
  out.s0_seed = opts.s0_seed;
  out.sequences = data.batch;
  for (const auto r : recurrences) {
    const EvalResult e = evaluate(model, data, r, opts);
    SweepRow row;
    row.recurrences = r;
    row.loss = e.loss;
    row.accuracy = e.accuracy;
    row.effective_params = effective_parameters(model, r);
    row.flop_proxy = 2.0 * row.effective_params;
    out.rows.push_back(row);
  }
  return out;
}

void write_sweep_csv(const std::filesystem::path& path, const SweepResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << kSweepHeader << '\n';
  char buf[256];
  for (const auto& r : result.rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%.17g,%.17g", static_cast<long long>(r.recurrences),
                  r.loss, r.accuracy, r.effective_params, r.flop_proxy);
    out << buf << '\n';
  }
}

nlohmann::json sweep_summary(const SweepResult& result) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : result.rows) {
    rows.push_back({{"r", r.recurrences},
                    {"loss", r.loss},
                    {"accuracy", std::isnan(r.accuracy) ? nlohmann::json(nullptr) : nlohmann::json(r.accuracy)},
                    {"effective_params", r.effective_params},
                    {"flop_proxy", r.flop_proxy}});
  }
  return {{"s0_seed", result.s0_seed}, {"sequences", result.sequences}, {"rows", rows}};
}

}  // namespace retrofit
