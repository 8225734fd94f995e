// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <fstream>
#include <sstream>

#include "retrofit/cli.hpp"
#include "retrofit/config.hpp"
#include "retrofit/flops.hpp"
#include "retrofit/schedules.hpp"
#include "retrofit/surgery.hpp"
#include "retrofit/train.hpp"
#include "support.hpp"

using namespace retrofit;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(const Command& cmd) {
  std::ostringstream out, err;
  const int code = run_command(cmd, out, err);
  return {code, out.str(), err.str()};
}

Command make(std::string sub, json options = json::object(), std::vector<std::string> overrides = {}) {
  Command c;
  c.subcommand = std::move(sub);
  c.options = std::move(options);
  c.overrides = std::move(overrides);
  return c;
}

const std::vector<std::string> kTinyModel{
    "model_config.hidden=16", "model_config.n_heads=2", "model_config.n_kv_heads=1", "model_config.head_dim=8",
    "model_config.ffn=32", "model_config.context_length=16", "batch.micro=2", "batch.global=2"};

}  // namespace

TEST_CASE("flops subcommand agrees with flops_for_step") {
  const auto r = run(make("flops", {{"preset", "tinyllama"}, {"plan", "4,8,4"}, {"mean-r", 32.0}, {"tokens", 1e6}}));
  REQUIRE(r.code == kExitOk);
  const json j = json::parse(r.out);
  const auto p = donor_preset("tinyllama");
  const auto expected = flops_for_step(count_parameters(p.config, PlanTuple{4, 8, 4}, CountConvention::table), 32, 8, 1e6);
  CHECK(j["flops"].get<double>() == expected.flops);
  CHECK(j["n1"].get<double>() == expected.n1);
  CHECK(j["prelude"] == 176177152);
  const auto f = run(make("flops", {{"preset", "llama"}, {"tokens", 2.0}}));
  CHECK(json::parse(f.out)["flops"].get<double>() == 6.0 * 2.0 * (16 * 60821504.0 + 2048));
}

TEST_CASE("schedule-dump delegates pointwise") {
  const std::vector<std::string> ov{"total_steps=12", "curriculum.shape=linear", "curriculum.target=6",
                                    "curriculum.warmup_steps=10", "lr.warmup_steps=3"};
  const auto r = run(make("schedule-dump", json::object(), ov));
  REQUIRE(r.code == kExitOk);
  const RunConfig cfg = resolve_config(json::object(), ov);
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,curriculum_mean,window,lr,sampled_r");
  std::int64_t step = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 5);
    CHECK(std::stoll(cells[0]) == step);
    CHECK(std::stoll(cells[1]) == curriculum_mean(cfg.curriculum, step));
    CHECK(std::stoll(cells[2]) == window_at(cfg.window, step));
    CHECK(std::stod(cells[3]) == lr_at(cfg.lr, step));
    CHECK(std::stoll(cells[4]) == recurrence_for_step(cfg, step));
    ++step;
  }
  CHECK(step == 12);
}

TEST_CASE("surgery then eval at r = 1 reproduces the pruned donor") {
  const auto dir = testing::scratch_dir("cli_pipeline");
  auto ov = kTinyModel;
  ov.insert(ov.end(), {"model.kind=fixed", "model.depth=4", "total_steps=3", "output_dir=" + (dir / "donor").string()});
  Command t = make("train", json::object(), ov);
  REQUIRE(run(t).code == kExitOk);
  const auto donor = (dir / "donor" / "final.ckpt").string();
  const auto s = run(make("surgery", {{"donor", donor}, {"plan", "1,1,1"}, {"noise", 0.0}, {"out", (dir / "rec.ckpt").string()}}));
  REQUIRE(s.code == kExitOk);
  CHECK(std::filesystem::exists(dir / "rec.ckpt.plan.json"));
  const json common{{"recurrences", "1"}, {"sequences", 4}, {"context", 16}};
  json a = common, b = common;
  a["checkpoint"] = (dir / "rec.ckpt").string();
  a["out"] = (dir / "eval_rec").string();
  b["checkpoint"] = donor;
  b["prune-plan"] = "1,1,1";
  b["out"] = (dir / "eval_donor").string();
  const auto ra = run(make("eval", a)), rb = run(make("eval", b));
  REQUIRE(ra.code == kExitOk);
  REQUIRE(rb.code == kExitOk);
  const double la = json::parse(ra.out)["rows"][0]["loss"].get<double>();
  const double lb = json::parse(rb.out)["rows"][0]["loss"].get<double>();
  CHECK(std::abs(la - lb) < 1e-10);
  CHECK(std::filesystem::exists(dir / "eval_rec" / "sweep.csv"));
  CHECK(std::filesystem::exists(dir / "eval_rec" / "resolved_config.json"));
  CHECK(std::filesystem::exists(dir / "donor" / "resolved_config.json"));
  const auto scores = run(make("layer-scores", {{"checkpoint", donor}, {"context", 16}}));
  REQUIRE(scores.code == kExitOk);
  CHECK(scores.out.rfind("layer,score\n", 0) == 0);
}

TEST_CASE("exit codes are distinct per error class") {
  const auto dir = testing::scratch_dir("cli_codes");
  CHECK(run(make("train", json::object(), {"curiculum.target=3"})).code == kExitConfig);
  CHECK(run(make("nope")).code == kExitConfig);
  CHECK(run(make("eval", {{"checkpoint", (dir / "missing.ckpt").string()}})).code == kExitInput);
  std::ofstream(dir / "junk.ckpt") << "garbage";
  CHECK(run(make("eval", {{"checkpoint", (dir / "junk.ckpt").string()}})).code == kExitFormat);
  auto ov = kTinyModel;
  ov.insert(ov.end(), {"total_steps=4", "lr.peak=1e300", "lr.warmup_steps=0", "max_nonfinite=0",
                       "output_dir=" + (dir / "div").string()});
  const auto div = run(make("train", json::object(), ov));
  CHECK(div.code == kExitDivergence);
  CHECK(div.err.find("diverged") != std::string::npos);
  CHECK(run(make("flops", {{"preset", "gpt"}})).code == kExitInput);
  CHECK(run(make("flops", {{"plan", "3,1"}})).code == kExitFormat);
}
