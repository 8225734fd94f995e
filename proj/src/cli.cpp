// SPDX-License-Identifier: Apache-2.0

#include "retrofit/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "retrofit/config.hpp"
#include "retrofit/errors.hpp"
#include "retrofit/eval.hpp"
#include "retrofit/flops.hpp"
#include "retrofit/json_io.hpp"
#include "retrofit/schedules.hpp"
#include "retrofit/surgery.hpp"
#include "retrofit/train.hpp"

namespace retrofit {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const InputError*>(&e)) return kExitInput;
  if (dynamic_cast<const DivergenceError*>(&e)) return kExitDivergence;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const PlanError*>(&e)) return kExitFormat;
  return kExitInternal;
}

namespace {

template <typename T>
T opt(const Command& cmd, const char* key, T fallback) {
  if (!cmd.options.contains(key) || cmd.options[key].is_null()) return fallback;
  try {
    return cmd.options[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("option --") + key + " has the wrong type");
  }
}

std::string required(const Command& cmd, const char* key) {
  const auto v = opt<std::string>(cmd, key, "");
  if (v.empty()) throw ConfigError(std::string("option --") + key + " is required");
  return v;
}

std::vector<std::int64_t> parse_int_list(const std::string& text, const char* key) {
  std::vector<std::int64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string("option --") + key + ": '" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string("option --") + key + " is empty");
  return out;
}

RunConfig command_config(const Command& cmd) {
  if (cmd.config_path.empty()) return resolve_config(nlohmann::json::object(), cmd.overrides);
  return load_config(cmd.config_path, cmd.overrides);
}

std::filesystem::path output_dir(const Command& cmd, const char* fallback) {
  RunConfig probe;
  probe.output_dir = opt<std::string>(cmd, "out", fallback);
  return resolve_output_dir(probe);
}

void cmd_surgery(const Command& cmd, std::ostream& out) {
  const Checkpoint donor = read_checkpoint(required(cmd, "donor"));
  if (checkpoint_kind(donor) != "fixed") throw FormatError("surgery: donor must be a fixed-depth checkpoint");
  const auto depth = donor.metadata.at("depth").get<std::int64_t>();
  const auto plan_file = opt<std::string>(cmd, "plan-file", "");
  const SurgeryPlan plan = plan_file.empty() ? make_plan(parse_tuple(opt<std::string>(cmd, "plan", "1,2,1")), depth)
                                             : read_plan_file(plan_file);
  SurgeryOptions so;
  const auto init = opt<std::string>(cmd, "adapter", "identity");
  if (init == "identity") {
    so.adapter_init = AdapterInit::identity_pass;
  } else if (init == "random") {
    so.adapter_init = AdapterInit::scaled_random;
  } else {
    throw ConfigError("option --adapter must be 'identity' or 'random'");
  }
  so.noise_std = opt<double>(cmd, "noise", so.noise_std);
  RandomStream stream(opt<std::uint64_t>(cmd, "seed", 0), "surgery");
  const Checkpoint result = apply_surgery(donor, plan, so, stream);
  const std::filesystem::path dest = required(cmd, "out");
  if (dest.has_parent_path()) std::filesystem::create_directories(dest.parent_path());
  write_checkpoint(dest, result);
  auto plan_path = dest;
  plan_path += ".plan.json";
  write_plan_file(plan_path, plan);
  nlohmann::json pj;
  to_json(pj, plan);
  out << nlohmann::json{{"checkpoint", dest.string()}, {"plan", pj}}.dump(2) << '\n';
}

void cmd_train(const Command& cmd, std::ostream& out) {
  const RunConfig cfg = command_config(cmd);
  const TrainResult r = train(cfg);
  out << nlohmann::json{{"steps_completed", r.steps_completed},
                        {"nonfinite_events", r.nonfinite_events},
                        {"output_dir", r.output_dir.string()},
                        {"metrics", r.metrics_path.string()},
                        {"final_checkpoint", r.final_checkpoint.string()},
                        {"final_train_loss", r.rows.empty() ? 0.0 : r.rows.back().train_loss}}
             .dump(2)
      << '\n';
}

AnyModel load_eval_model(const Command& cmd) {
  AnyModel model = model_from_checkpoint(read_checkpoint(required(cmd, "checkpoint")));
  const auto prune = opt<std::string>(cmd, "prune-plan", "");
  if (!prune.empty()) {
    auto* fixed = std::get_if<FixedModel>(&model);
    if (fixed == nullptr) throw ConfigError("option --prune-plan needs a fixed-depth checkpoint");
    const auto plan = make_plan(parse_tuple(prune), static_cast<std::int64_t>(fixed->blocks.size()));
    const auto layers = kept_layers(plan);
    model = prune_to_layers(*fixed, layers);
  }
  return model;
}

void cmd_eval(const Command& cmd, std::ostream& out) {
  const AnyModel model = load_eval_model(cmd);
  const auto dataset = opt<std::string>(cmd, "dataset", "arith");
  if (!is_dataset(dataset)) throw InputError("unknown dataset '" + dataset + "'");
  const auto sequences = opt<std::int64_t>(cmd, "sequences", 32);
  const auto context = opt<std::int64_t>(cmd, "context", std::min<std::int64_t>(model_config(model).context_length, 64));
  const auto data_seed = opt<std::uint64_t>(cmd, "data-seed", 7);
  EvalOptions eo;
  eo.s0_seed = opt<std::uint64_t>(cmd, "s0-seed", eo.s0_seed);
  eo.batch_size = opt<std::int64_t>(cmd, "batch", eo.batch_size);
  const auto recurrences = parse_int_list(opt<std::string>(cmd, "recurrences", "1,2,4,8,16,32"), "recurrences");
  const TokenBatch data = make_eval_set(dataset, sequences, context, data_seed);
  const SweepResult res = eval_sweep(model, data, recurrences, eo);

  const auto dir = output_dir(cmd, "eval");
  std::filesystem::create_directories(dir);
  write_sweep_csv(dir / "sweep.csv", res);
  nlohmann::json summary = sweep_summary(res);
  summary["dataset"] = dataset;
  summary["context"] = context;
  summary["data_seed"] = data_seed;
  summary["checkpoint"] = cmd.options.value("checkpoint", "");
  std::ofstream(dir / "sweep.json") << summary.dump(2) << '\n';
  std::ofstream(dir / "resolved_config.json")
      << nlohmann::json{{"subcommand", "eval"}, {"options", cmd.options}}.dump(2) << '\n';
  out << summary.dump(2) << '\n';
}

void cmd_flops(const Command& cmd, std::ostream& out) {
  ModelConfig mc;
  std::int64_t donor_depth = 0;
  const auto preset = opt<std::string>(cmd, "preset", "");
  if (!preset.empty()) {
    const DonorPreset p = donor_preset(preset);
    mc = p.config;
    donor_depth = p.depth;
  } else {
    mc = command_config(cmd).model_config;
  }
  const auto tokens = opt<double>(cmd, "tokens", 1e6);
  const auto plan_text = opt<std::string>(cmd, "plan", "");
  nlohmann::json report{{"tokens", tokens}, {"model_config", mc}};
  if (plan_text.empty()) {
    const auto depth = opt<std::int64_t>(cmd, "depth", donor_depth > 0 ? donor_depth : 4);
    const auto counts = count_fixed_parameters(mc, depth);
    const auto f = flops_fixed(static_cast<double>(counts.body), tokens);
    report["kind"] = "fixed";
    report["depth"] = depth;
    report["embeddings"] = counts.embeddings;
    report["non_embedding_params"] = counts.body;
    report["flops"] = f.flops;
  } else {
    const PlanTuple tuple = parse_tuple(plan_text);
    const auto pr = count_parameters(mc, tuple, CountConvention::table);
    const auto mean_r = opt<double>(cmd, "mean-r", 32.0);
    const auto window = opt<std::int64_t>(cmd, "window", 8);
    const auto f = flops_for_step(pr, mean_r, window, tokens);
    report["kind"] = "recurrent";
    report["plan"] = {tuple.prelude, tuple.recurrent, tuple.coda};
    report["embeddings"] = pr.embeddings;
    report["prelude"] = pr.prelude;
    report["recurrent_block"] = pr.recurrent_block;
    report["coda"] = pr.coda;
    report["adapter"] = pr.adapter;
    report["mean_r"] = mean_r;
    report["window"] = window;
    report["n1"] = f.n1;
    report["n2"] = f.n2;
    report["flops"] = f.flops;
  }
  out << report.dump(2) << '\n';
}

void cmd_schedule_dump(const Command& cmd, std::ostream& out) {
  const RunConfig cfg = command_config(cmd);
  const auto steps = opt<std::int64_t>(cmd, "steps", cfg.total_steps);
  std::ostringstream csv;
  csv << "step,curriculum_mean,window,lr,sampled_r\n";
  char buf[160];
  for (std::int64_t s = 0; s < steps; ++s) {
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%lld,%.17g,%lld", static_cast<long long>(s),
                  static_cast<long long>(curriculum_mean(cfg.curriculum, s)),
                  static_cast<long long>(window_at(cfg.window, s)), lr_at(cfg.lr, s),
                  static_cast<long long>(recurrence_for_step(cfg, s)));
    csv << buf << '\n';
  }
  const auto dest = opt<std::string>(cmd, "out", "");
  if (dest.empty()) {
    out << csv.str();
  } else {
    std::ofstream(dest) << csv.str();
    out << "wrote " << dest << '\n';
  }
}

void cmd_layer_scores(const Command& cmd, std::ostream& out) {
  const AnyModel model = model_from_checkpoint(read_checkpoint(required(cmd, "checkpoint")));
  const auto* fixed = std::get_if<FixedModel>(&model);
  if (fixed == nullptr) throw FormatError("layer-scores: needs a fixed-depth checkpoint");
  const auto dataset = opt<std::string>(cmd, "dataset", "text");
  if (!is_dataset(dataset)) throw InputError("unknown dataset '" + dataset + "'");
  const auto context = opt<std::int64_t>(cmd, "context", std::min<std::int64_t>(fixed->config.context_length, 64));
  const TokenBatch data = make_eval_set(dataset, opt<std::int64_t>(cmd, "sequences", 4), context,
                                        opt<std::uint64_t>(cmd, "data-seed", 7));
  const auto scores = block_influence_scores(*fixed, data.inputs, data.seq_len);
  out << "layer,score\n";
  char buf[64];
  for (std::size_t i = 0; i < scores.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g", i, scores[i]);
    out << buf << '\n';
  }
}

}  // namespace

void execute(const Command& cmd, std::ostream& out) {
  if (cmd.subcommand == "surgery") return cmd_surgery(cmd, out);
  if (cmd.subcommand == "train") return cmd_train(cmd, out);
  if (cmd.subcommand == "eval") return cmd_eval(cmd, out);
  if (cmd.subcommand == "flops") return cmd_flops(cmd, out);
  if (cmd.subcommand == "schedule-dump") return cmd_schedule_dump(cmd, out);
  if (cmd.subcommand == "layer-scores") return cmd_layer_scores(cmd, out);
  throw ConfigError("unknown subcommand '" + cmd.subcommand + "'");
}

int run_command(const Command& cmd, std::ostream& out, std::ostream& err) {
  try {
    execute(cmd, out);
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Retrofit depth recurrence into fixed-depth decoder transformers."};
  app.require_subcommand(1);
  Command cmd;
  std::map<std::string, std::string> strs;
  std::map<std::string, double> nums;

  auto common = [&](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("-c,--config", cmd.config_path, "run config JSON");
      sub->add_option("--set", cmd.overrides, "override, dotted.key=value")->take_all();
    }
  };
  auto str = [&](CLI::App* sub, const std::string& name, const std::string& help) {
    sub->add_option("--" + name, strs[name], help);
  };
  auto num = [&](CLI::App* sub, const std::string& name, const std::string& help) {
    sub->add_option("--" + name, nums[name], help);
  };

  auto* surgery = app.add_subcommand("surgery", "build a recurrent checkpoint from a fixed-depth donor");
  str(surgery, "donor", "donor checkpoint");
  str(surgery, "plan", "p,r,c tuple (default layer rule)");
  str(surgery, "plan-file", "explicit plan JSON");
  str(surgery, "adapter", "identity | random");
  num(surgery, "noise", "identity adapter noise std");
  num(surgery, "seed", "seed");
  str(surgery, "out", "output checkpoint");

  auto* trainc = app.add_subcommand("train", "train from a config");
  common(trainc, true);

  auto* evalc = app.add_subcommand("eval", "recurrence sweep on a held-out synthetic set");
  str(evalc, "checkpoint", "checkpoint");
  str(evalc, "dataset", "dataset name");
  str(evalc, "recurrences", "comma list");
  str(evalc, "prune-plan", "evaluate a fixed checkpoint restricted to this plan's layers");
  num(evalc, "sequences", "held-out sequences");
  num(evalc, "context", "tokens per sequence");
  num(evalc, "data-seed", "held-out set seed");
  num(evalc, "s0-seed", "initial-state seed");
  num(evalc, "batch", "sequences per forward pass");
  str(evalc, "out", "output directory");

  auto* flopsc = app.add_subcommand("flops", "parameter and training FLOP accounting");
  common(flopsc, true);
  str(flopsc, "preset", "tinyllama | llama | olmo");
  str(flopsc, "plan", "p,r,c (omit for fixed depth)");
  num(flopsc, "depth", "fixed depth");
  num(flopsc, "mean-r", "mean recurrence");
  num(flopsc, "window", "backprop window");
  num(flopsc, "tokens", "tokens D");

  auto* sched = app.add_subcommand("schedule-dump", "per-step curriculum, window, lr and sampled r");
  common(sched, true);
  num(sched, "steps", "steps (default total_steps)");
  str(sched, "out", "CSV path (default stdout)");

  auto* scores = app.add_subcommand("layer-scores", "block influence per donor layer");
  str(scores, "checkpoint", "fixed-depth checkpoint");
  str(scores, "dataset", "calibration dataset");
  num(scores, "sequences", "calibration sequences");
  num(scores, "context", "tokens per sequence");
  num(scores, "data-seed", "calibration seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  CLI::App* chosen = app.get_subcommands().front();
  cmd.subcommand = chosen->get_name();
  for (const auto& [name, value] : strs) {
    if (chosen->get_option_no_throw("--" + name) && chosen->count("--" + name) > 0) cmd.options[name] = value;
  }
  for (const auto& [name, value] : nums) {
    if (!chosen->get_option_no_throw("--" + name) || chosen->count("--" + name) == 0) continue;
    const bool integral = name != "noise" && name != "mean-r" && name != "tokens";
    if (integral) {
      if (value != static_cast<double>(static_cast<long long>(value)) || (value < 0 && name != "depth")) {
        std::cerr << "error: option --" << name << " must be a non-negative integer\n";
        return kExitConfig;
      }
      cmd.options[name] = static_cast<std::int64_t>(value);
    } else {
      cmd.options[name] = value;
    }
  }
  return run_command(cmd, std::cout, std::cerr);
}

}  // namespace retrofit
