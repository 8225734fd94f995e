// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <fstream>

#include "retrofit/checkpoint.hpp"
#include "retrofit/errors.hpp"
#include "retrofit/surgery.hpp"
#include "support.hpp"

using namespace retrofit;
using namespace retrofit::testing;

namespace {
using Layers = std::vector<std::int64_t>;
}

TEST_CASE("default plan rule") {
  const auto p = make_plan(PlanTuple{4, 8, 4}, 22);
  CHECK(p.prelude_layers == Layers{0, 1, 2, 3});
  CHECK(p.recurrent_layers == Layers{10, 11, 12, 13, 14, 15, 16, 17});
  CHECK(p.coda_layers == Layers{18, 19, 20, 21});
  const auto q = make_plan(PlanTuple{4, 6, 4}, 16);
  CHECK(q.recurrent_layers == Layers{6, 7, 8, 9, 10, 11});
  CHECK(q.coda_layers == Layers{12, 13, 14, 15});
  const auto full = make_plan(PlanTuple{1, 2, 1}, 4);
  CHECK(kept_layers(full) == Layers{0, 1, 2, 3});
}

TEST_CASE("plan errors") {
  CHECK_THROWS_AS(make_plan(PlanTuple{4, 8, 12}, 22), PlanError);
  CHECK_THROWS_AS(make_plan(PlanTuple{0, 0, 1}, 4), PlanError);
  CHECK_THROWS_AS(make_plan(4, Layers{0}, Layers{0, 1}, Layers{3}), PlanError);
  CHECK_THROWS_AS(make_plan(4, Layers{0}, Layers{2, 1}, Layers{3}), PlanError);
  CHECK_THROWS_AS(make_plan(4, Layers{0}, Layers{1, 4}, Layers{3}), PlanError);
  CHECK_THROWS_AS(parse_tuple("1,2"), PlanError);
  CHECK(parse_tuple("2,3,4") == PlanTuple{2, 3, 4});
}

TEST_CASE("plan file round trip and strict parsing") {
  const auto dir = scratch_dir("plan");
  const auto plan = make_plan(8, Layers{0, 1}, Layers{4, 5}, Layers{7});
  write_plan_file(dir / "plan.json", plan);
  CHECK(read_plan_file(dir / "plan.json") == plan);
  std::ofstream(dir / "bad.json") << R"({"donor_depth": 4, "tuple": [1, 2, 1], "extra": 1})";
  CHECK_THROWS_AS(read_plan_file(dir / "bad.json"), PlanError);
}

TEST_CASE("block parameter count matches hand arithmetic") {
  ModelConfig c;
  c.hidden = 2048;
  c.n_heads = 32;
  c.n_kv_heads = 4;
  c.head_dim = 64;
  c.ffn = 5632;
  // q, o: 2048^2 each; k, v: 2048*256 each; three 2048x5632 MLP matrices; two norms.
  const std::int64_t expected = 2 * 2048LL * 2048 + 2 * 2048LL * 256 + 3 * 2048LL * 5632 + 2 * 2048;
  CHECK(block_parameter_count(c) == expected);
  CHECK(expected == 44044288);
}

TEST_CASE("count conventions") {
  const auto cfg = tiny_config();
  const auto t = count_parameters(cfg, PlanTuple{1, 2, 1}, CountConvention::table);
  const auto f = count_parameters(cfg, PlanTuple{1, 2, 1}, CountConvention::full);
  const auto b = block_parameter_count(cfg);
  CHECK(t.prelude == b);
  CHECK(t.recurrent_block == 2 * b);
  CHECK(t.adapter == 2 * cfg.hidden * cfg.hidden);
  CHECK(t.body == 4 * b);
  CHECK(f.body == 4 * b + t.adapter + cfg.hidden);
  CHECK(t.embeddings == 2 * cfg.vocab_size * cfg.hidden);
  auto tied = cfg;
  tied.tie_embeddings = true;
  CHECK(count_parameters(tied, PlanTuple{1, 2, 1}, CountConvention::table).embeddings == cfg.vocab_size * cfg.hidden);
}

TEST_CASE("presets") {
  const auto t = donor_preset("tinyllama");
  CHECK(t.depth == 22);
  CHECK(count_fixed_parameters(t.config, t.depth).body == 22 * 44044288LL + 2048);
  CHECK_THROWS_AS(donor_preset("gpt"), InputError);
}

TEST_CASE("identity surgery reproduces the pruned donor and keeps weights verbatim") {
  const auto cfg = tiny_config();
  RandomStream init(1, "init");
  const FixedModel donor = init_fixed(cfg, 6, init);
  const auto plan = make_plan(PlanTuple{1, 2, 2}, 6);
  RandomStream s(2, "surgery");
  SurgeryOptions opts;
  opts.noise_std = 0.0;
  const RecurrentModel rec = apply_surgery(donor, plan, opts, s);
  CHECK(rec.recurrent.size() == 2);
  CHECK(bitwise_equal(rec.recurrent[1].wq, donor.blocks[3].wq));
  CHECK(bitwise_equal(rec.coda[0].w_down, donor.blocks[4].w_down));
  const auto tokens = random_tokens(16, cfg.vocab_size, 3);
  const Tensor s0 = random_tensor({16, cfg.hidden}, 4, cfg.sigma_s0);
  const Tensor a = forward_recurrent(rec, tokens, 8, RecurrenceRun{1, 8}, s0);
  const auto layers = kept_layers(plan);
  const Tensor b = forward_fixed(prune_to_layers(donor, layers), tokens, 8);
  CHECK(max_abs_diff(a, b) < 1e-10);
}

TEST_CASE("noisy and random adapters") {
  const auto cfg = tiny_config();
  RandomStream init(1, "init");
  const FixedModel donor = init_fixed(cfg, 4, init);
  const auto plan = make_plan(PlanTuple{1, 2, 1}, 4);
  RandomStream s(2, "surgery");
  const RecurrentModel noisy = apply_surgery(donor, plan, SurgeryOptions{}, s);
  const auto h = cfg.hidden;
  double off = 0;
  for (std::int64_t i = 0; i < 2 * h; ++i)
    for (std::int64_t j = 0; j < h; ++j) {
      const double ideal = (i >= h && i - h == j) ? 1.0 : 0.0;
      off = std::max(off, std::abs(noisy.adapter.at(i, j) - ideal));
    }
  CHECK(off > 0.0);
  CHECK(off < 1e-2);
  SurgeryOptions random;
  random.adapter_init = AdapterInit::scaled_random;
  RandomStream s2(2, "surgery");
  const RecurrentModel r = apply_surgery(donor, plan, random, s2);
  CHECK(std::abs(r.adapter.at(h, 0) - 1.0) > 0.1);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto cfg = tiny_config();
  RandomStream init(1, "init");
  const RecurrentModel m = init_scaled(cfg, 1, 2, 1, init);
  const auto dir = scratch_dir("ckpt");
  write_checkpoint(dir / "m.ckpt", to_checkpoint(m));
  const Checkpoint read = read_checkpoint(dir / "m.ckpt");
  CHECK(checkpoint_kind(read) == "recurrent");
  RecurrentModel back = recurrent_from_checkpoint(read);
  RecurrentModel orig = m;
  std::vector<Tensor> a, b;
  for_each_parameter(orig, [&](const std::string&, Tensor& t, ParamRole) { a.push_back(t); });
  for_each_parameter(back, [&](const std::string&, Tensor& t, ParamRole) { b.push_back(t); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i], b[i]));
  CHECK(back.config == m.config);
  CHECK(to_checkpoint(back).serialize() == to_checkpoint(m).serialize());
}

TEST_CASE("checkpoint format errors") {
  Checkpoint c;
  c.put("x", Tensor({2}, {1.0, 2.0}));
  const std::string bytes = c.serialize();
  CHECK(Checkpoint::deserialize(bytes).get("x").data()[1] == 2.0);
  CHECK_THROWS_AS(Checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(Checkpoint::deserialize(bad), FormatError);
  CHECK_THROWS_AS(c.get("y"), FormatError);
  const auto dir = scratch_dir("ckpt_err");
  CHECK_THROWS(read_checkpoint(dir / "missing.ckpt"));
  // Schema mismatch: a fixed checkpoint read as recurrent.
  RandomStream init(1, "init");
  CHECK_THROWS_AS(recurrent_from_checkpoint(to_checkpoint(init_fixed(tiny_config(), 2, init))), FormatError);
}

TEST_CASE("checkpoint-level surgery records the plan") {
  const auto cfg = tiny_config();
  RandomStream init(1, "init");
  const Checkpoint donor = to_checkpoint(init_fixed(cfg, 4, init));
  RandomStream s(2, "surgery");
  const Checkpoint out = apply_surgery(donor, make_plan(PlanTuple{1, 2, 1}, 4), SurgeryOptions{}, s);
  CHECK(checkpoint_kind(out) == "recurrent");
  CHECK(out.metadata.contains("plan"));
  CHECK(out.metadata["adapter_init"] == "identity-pass");
}

TEST_CASE("block influence scores") {
  const auto cfg = tiny_config();
  RandomStream init(1, "init");
  FixedModel donor = init_fixed(cfg, 3, init);
  // Zeroing a block's output projections makes it the identity map.
  donor.blocks[1].wo = Tensor::zeros(donor.blocks[1].wo.shape());
  donor.blocks[1].w_down = Tensor::zeros(donor.blocks[1].w_down.shape());
  const auto scores = block_influence_scores(donor, random_tokens(16, cfg.vocab_size, 5), 8);
  REQUIRE(scores.size() == 3);
  CHECK(scores[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(scores[0] > scores[1]);
  CHECK(scores[2] > scores[1]);
}
