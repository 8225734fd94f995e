// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>

#include "retrofit/eval.hpp"
#include "retrofit/surgery.hpp"
#include "support.hpp"

using namespace retrofit;
using namespace retrofit::testing;

namespace {

ModelConfig byte_config() {
  ModelConfig c = tiny_config();
  c.vocab_size = kByteVocab;
  c.context_length = 16;
  return c;
}

}  // namespace

TEST_CASE("uniform logits give ln(vocab)") {
  const auto cfg = byte_config();
  RandomStream s(1, "init");
  FixedModel m = init_fixed(cfg, 1, s);
  m.unembedding = Tensor::zeros(m.unembedding.shape());
  const TokenBatch data = make_eval_set("arith", 3, 16, 1);
  CHECK(val_loss(m, data, 1) == doctest::Approx(std::log(static_cast<double>(kByteVocab))).epsilon(1e-12));
}

TEST_CASE("evaluation is deterministic and batch-size independent") {
  const auto cfg = byte_config();
  RandomStream s(2, "init");
  const AnyModel m = init_scaled(cfg, 1, 2, 1, s);
  const TokenBatch data = make_eval_set("arith", 5, 16, 2);
  EvalOptions a, b;
  b.batch_size = 2;
  const EvalResult x = evaluate(m, data, 3, a);
  const EvalResult y = evaluate(m, data, 3, a);
  const EvalResult z = evaluate(m, data, 3, b);
  CHECK(x.loss == y.loss);
  CHECK(x.accuracy == y.accuracy);
  CHECK(x.loss == doctest::Approx(z.loss).epsilon(1e-13));
  EvalOptions other;
  other.s0_seed = 99;
  CHECK(evaluate(m, data, 3, other).loss != x.loss);
}

TEST_CASE("fresh identity surgery matches the pruned donor at r = 1") {
  const auto cfg = byte_config();
  RandomStream s(3, "init");
  const FixedModel donor = init_fixed(cfg, 5, s);
  const auto plan = make_plan(PlanTuple{1, 2, 1}, 5);
  SurgeryOptions opts;
  opts.noise_std = 0.0;
  RandomStream ss(4, "surgery");
  const AnyModel rec = apply_surgery(donor, plan, opts, ss);
  const auto layers = kept_layers(plan);
  const AnyModel pruned = prune_to_layers(donor, layers);
  const TokenBatch data = make_eval_set("arith", 4, 16, 3);
  CHECK(std::abs(val_loss(rec, data, 1) - val_loss(pruned, data, 1)) < 1e-10);
}

TEST_CASE("sweep rows and effective parameters") {
  const auto cfg = byte_config();
  RandomStream s(5, "init");
  const AnyModel m = init_scaled(cfg, 1, 2, 1, s);
  const TokenBatch data = make_eval_set("copy", 3, 16, 4);
  const SweepResult one = eval_sweep(m, data, {1});
  CHECK(one.rows.size() == 1);
  const SweepResult many = eval_sweep(m, data, {4, 1, 2});
  REQUIRE(many.rows.size() == 3);
  CHECK(many.rows[0].recurrences == 1);
  CHECK(many.rows[2].recurrences == 4);
  CHECK(many.rows[0].loss == one.rows[0].loss);
  CHECK(many.rows[0].accuracy == one.rows[0].accuracy);
  const auto b = block_parameter_count(cfg);
  const double rho = 2.0 * b + 2.0 * cfg.hidden * cfg.hidden;
  CHECK(many.rows[2].effective_params == 2.0 * b + 4 * rho);
  CHECK(many.rows[2].flop_proxy == 2 * many.rows[2].effective_params);
  const auto dir = scratch_dir("sweep");
  write_sweep_csv(dir / "s.csv", many);
  std::ifstream in(dir / "s.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "r,loss,accuracy,effective_params,flop_proxy");
  CHECK(sweep_summary(many)["rows"].size() == 3);
  CHECK_THROWS(eval_sweep(m, data, {}));
}

TEST_CASE("accuracy is NaN without answer positions") {
  const auto cfg = byte_config();
  RandomStream s(6, "init");
  const AnyModel m = init_fixed(cfg, 1, s);
  const TokenBatch data = make_eval_set("text", 2, 16, 5);
  CHECK(std::isnan(evaluate(m, data, 1).accuracy));
}
