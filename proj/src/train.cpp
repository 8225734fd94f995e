// SPDX-License-Identifier: Apache-2.0

#include "retrofit/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "retrofit/errors.hpp"
#include "retrofit/kernels.hpp"
#include "retrofit/ops.hpp"
#include "retrofit/schedules.hpp"
#include "retrofit/surgery.hpp"

namespace retrofit {

const ModelConfig& model_config(const AnyModel& m) {
  return std::visit([](const auto& x) -> const ModelConfig& { return x.config; }, m);
}

std::vector<ParamSlot> parameter_slots(AnyModel& m) {
  return std::visit([](auto& x) { return parameter_slots(x); }, m);
}

Checkpoint to_checkpoint(const AnyModel& m) {
  return std::visit([](const auto& x) { return to_checkpoint(x); }, m);
}

AnyModel model_from_checkpoint(const Checkpoint& ckpt) {
  if (checkpoint_kind(ckpt) == "fixed") return fixed_from_checkpoint(ckpt);
  return recurrent_from_checkpoint(ckpt);
}

Tensor forward_logits(const AnyModel& m, std::span<const std::int32_t> tokens,
                      std::int64_t seq_len, const RecurrenceRun& run, const Tensor& s0) {
  if (const auto* fixed = std::get_if<FixedModel>(&m)) return forward_fixed(*fixed, tokens, seq_len);
  return forward_recurrent(std::get<RecurrentModel>(m), tokens, seq_len, run, s0);
}

Tensor initial_states(const ModelConfig& cfg, std::int64_t first, std::int64_t sequences,
                      std::int64_t seq_len, const RandomStream& base) {
  const auto h = cfg.hidden;
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(sequences * seq_len * h));
  for (std::int64_t i = 0; i < sequences; ++i) {
    RandomStream s = base.fork("seq", static_cast<std::uint64_t>(first + i));
    const Tensor part = sample_initial_state(cfg, seq_len, s);
    data.insert(data.end(), part.data().begin(), part.data().end());
  }
  return Tensor({sequences * seq_len, h}, std::move(data));
}

StepGradients accumulate_gradients(const AnyModel& model, const TokenBatch& batch,
                                   std::int64_t micro_batch, const RecurrenceRun& run,
                                   const RandomStream& s0_base) {
  if (micro_batch < 1 || batch.batch % micro_batch != 0) {
    throw ContractError("accumulate_gradients: batch must be a multiple of the micro batch");
  }
  const bool recurrent = std::holds_alternative<RecurrentModel>(model);
  StepGradients out;
  std::vector<std::vector<double>> acc;
  const double total_tokens = static_cast<double>(batch.batch * batch.seq_len);
  for (std::int64_t first = 0; first < batch.batch; first += micro_batch) {
    const TokenBatch mb = slice_batch(batch, first, micro_batch);
    const double frac = static_cast<double>(mb.batch * mb.seq_len) / total_tokens;
    Tape tape;
    TapeScope scope(tape);
    AnyModel bound = std::visit([&](const auto& m) { return AnyModel(watch_parameters(m, tape)); }, model);
    const Tensor s0 = recurrent ? initial_states(model_config(model), first, micro_batch,
                                                 batch.seq_len, s0_base)
                                : Tensor();
    const Tensor logits = forward_logits(bound, mb.inputs, mb.seq_len, run, s0);
    const Tensor loss = cross_entropy(logits, mb.targets);
    out.loss += frac * loss.item();
    if (!std::isfinite(loss.item())) {
      out.loss = loss.item();
      return out;
    }
    const Gradients grads = backward(loss, tape);
    const auto slots = parameter_slots(bound);
    if (acc.empty()) acc.resize(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const Tensor g = grads.of_or_zero(*slots[i].value);
      auto& a = acc[i];
      if (a.empty()) a.assign(g.data().size(), 0.0);
      auto gd = g.data();
      for (std::size_t k = 0; k < a.size(); ++k) a[k] += frac * gd[k];
    }
  }
  AnyModel shape_source = model;
  const auto slots = parameter_slots(shape_source);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    out.grads.emplace_back(slots[i].value->shape(), std::move(acc[i]));
  }
  return out;
}

std::string format_metrics_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%lld,%lld,%lld,%lld,%.10g,%d",
                static_cast<long long>(r.step), r.train_loss, r.lr,
                static_cast<long long>(r.curriculum_mean), static_cast<long long>(r.sampled_r),
                static_cast<long long>(r.window), static_cast<long long>(r.tokens_seen),
                r.cumulative_flops, r.nonfinite ? 1 : 0);
  return buf;
}

std::int64_t recurrence_for_step(const RunConfig& cfg, std::int64_t step) {
  RandomStream s = RandomStream(cfg.seed, "depth").fork("step", static_cast<std::uint64_t>(step));
  const auto mean = curriculum_mean(cfg.curriculum, step);
  return sample_recurrence(DepthDistribution{static_cast<double>(mean), cfg.depth_spread}, s);
}

std::filesystem::path interval_checkpoint_path(const std::filesystem::path& dir, std::int64_t step) {
  char name[64];
  std::snprintf(name, sizeof(name), "ckpt_step%06lld.ckpt", static_cast<long long>(step));
  return dir / name;
}

AnyModel initial_model(const RunConfig& cfg) {
  if (!cfg.model.checkpoint.empty()) {
    AnyModel m = model_from_checkpoint(read_checkpoint(cfg.model.checkpoint));
    const bool want_fixed = cfg.model.kind == ModelKind::fixed;
    if (std::holds_alternative<FixedModel>(m) != want_fixed) {
      throw ConfigError("config key 'model.kind' does not match the checkpoint at " +
                        cfg.model.checkpoint);
    }
    return m;
  }
  RandomStream stream(cfg.seed, "init");
  InitOptions opts;
  opts.emb_scale = cfg.model.emb_scale;
  if (cfg.model.kind == ModelKind::fixed) {
    return init_fixed(cfg.model_config, cfg.model.depth, stream, opts);
  }
  opts.mean_recurrence = static_cast<double>(cfg.curriculum.target);
  return init_scaled(cfg.model_config, cfg.model.plan.prelude, cfg.model.plan.recurrent,
                     cfg.model.plan.coda, stream, opts);
}

namespace {

struct TrainState {
  std::int64_t next_step = 0;
  double cumulative_flops = 0.0;
  std::int64_t nonfinite_events = 0;
  std::int64_t tokens_seen = 0;
};

void save_state(const std::filesystem::path& path, const AnyModel& model, const Optimizer& opt,
                const TrainState& st, const RunConfig& cfg, const nlohmann::json& source_meta) {
  Checkpoint ckpt = to_checkpoint(model);
  if (source_meta.contains("plan")) ckpt.metadata["plan"] = source_meta["plan"];
  ckpt.metadata["train_state"] = {{"next_step", st.next_step},
                                  {"cumulative_flops", st.cumulative_flops},
                                  {"nonfinite_events", st.nonfinite_events},
                                  {"tokens_seen", st.tokens_seen},
                                  {"seed", cfg.seed}};
  opt.save(ckpt);
  write_checkpoint(path, ckpt);
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& dir) {
  std::filesystem::path best;
  if (!std::filesystem::exists(dir)) return best;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("ckpt_step", 0) == 0 && entry.path().extension() == ".ckpt" &&
        (best.empty() || name > best.filename().string())) {
      best = entry.path();
    }
  }
  return best;
}

void truncate_metrics(const std::filesystem::path& path, std::int64_t next_step) {
  std::ifstream in(path);
  if (!in) throw FormatError("resume: metrics file missing at " + path.string());
  std::vector<std::string> kept;
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw FormatError("resume: unexpected metrics header");
  kept.push_back(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) < next_step) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace

TrainResult train(const RunConfig& cfg) {
  cfg.validate();
  const auto dir = resolve_output_dir(cfg);
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "resolved_config.json");
    out << to_json(cfg).dump(2) << '\n';
    std::ofstream meta(dir / "run_meta.json");
    meta << nlohmann::json{{"threads", kernels::max_threads()},
                           {"backend", kernels::backend() == kernels::Backend::serial ? "serial" : "parallel"}}
                .dump(2)
         << '\n';
  }

  TrainResult result;
  result.output_dir = dir;
  result.metrics_path = dir / "metrics.csv";
  AnyModel model = initial_model(cfg);
  nlohmann::json source_meta = nlohmann::json::object();
  if (!cfg.model.checkpoint.empty()) source_meta = read_checkpoint(cfg.model.checkpoint).metadata;
  Optimizer opt(cfg.optimizer);
  TrainState st;

  if (!cfg.resume.empty()) {
    const auto path = cfg.resume == "latest" ? latest_checkpoint(dir) : std::filesystem::path(cfg.resume);
    if (path.empty()) throw FormatError("resume: no interval checkpoint in " + dir.string());
    const Checkpoint ckpt = read_checkpoint(path);
    model = model_from_checkpoint(ckpt);
    opt.load(ckpt);
    const auto& ts = ckpt.metadata.at("train_state");
    st.next_step = ts.at("next_step").get<std::int64_t>();
    st.cumulative_flops = ts.at("cumulative_flops").get<double>();
    st.nonfinite_events = ts.at("nonfinite_events").get<std::int64_t>();
    st.tokens_seen = ts.at("tokens_seen").get<std::int64_t>();
    truncate_metrics(result.metrics_path, st.next_step);
  } else {
    std::ofstream out(result.metrics_path, std::ios::trunc);
    out << kMetricsHeader << '\n';
    save_state(interval_checkpoint_path(dir, 0), model, opt, st, cfg, source_meta);
  }

  std::ofstream metrics(result.metrics_path, std::ios::app);
  const auto slots = parameter_slots(model);
  const bool recurrent = std::holds_alternative<RecurrentModel>(model);
  const auto& mcfg = model_config(model);
  const auto seq_len = mcfg.context_length;
  const BatchSource source(cfg.data, seq_len, cfg.seed);
  const double tokens_per_step = static_cast<double>(cfg.global_batch * seq_len);

  ParamReport report;
  double fixed_params = 0.0;
  if (recurrent) {
    const auto& rm = std::get<RecurrentModel>(model);
    report = count_parameters(mcfg,
                              PlanTuple{static_cast<std::int64_t>(rm.prelude.size()),
                                        static_cast<std::int64_t>(rm.recurrent.size()),
                                        static_cast<std::int64_t>(rm.coda.size())},
                              CountConvention::table);
  } else {
    fixed_params = static_cast<double>(
        count_fixed_parameters(mcfg, static_cast<std::int64_t>(std::get<FixedModel>(model).blocks.size())).body);
  }

  FlopMeter meter;
  meter.reset(st.cumulative_flops);
  for (std::int64_t step = st.next_step; step < cfg.total_steps; ++step) {
    MetricsRow row;
    row.step = step;
    row.lr = lr_at(cfg.lr, step);
    RecurrenceRun run;
    FlopBreakdown flops;
    if (recurrent) {
      row.curriculum_mean = curriculum_mean(cfg.curriculum, step);
      row.window = window_at(cfg.window, step);
      row.sampled_r = recurrence_for_step(cfg, step);
      run = RecurrenceRun{row.sampled_r, row.window};
      flops = flops_for_step(report, static_cast<double>(row.curriculum_mean), row.window, tokens_per_step);
    } else {
      flops = flops_fixed(fixed_params, tokens_per_step);
    }

    const TokenBatch batch = source.batch(step, 0, cfg.global_batch);
    const RandomStream s0_base = RandomStream(cfg.seed, "s0").fork("step", static_cast<std::uint64_t>(step));
    bool ok = true;
    try {
      StepGradients sg = accumulate_gradients(model, batch, cfg.micro_batch, run, s0_base);
      row.train_loss = sg.loss;
      ok = std::isfinite(sg.loss);
      if (ok) {
        clip_global_norm(sg.grads, cfg.clip_norm);
        ok = opt.step(slots, sg.grads, row.lr);
      }
    } catch (const NonFiniteError&) {
      ok = false;
    }
    meter.add(flops);
    st.cumulative_flops = meter.cumulative();
    st.tokens_seen += static_cast<std::int64_t>(tokens_per_step);
    st.next_step = step + 1;
    row.tokens_seen = st.tokens_seen;
    row.cumulative_flops = st.cumulative_flops;
    row.nonfinite = !ok;
    metrics << format_metrics_row(row) << '\n';
    metrics.flush();
    result.rows.push_back(row);
    if (!ok && ++st.nonfinite_events > cfg.max_nonfinite) {
      throw DivergenceError("training diverged: " + std::to_string(st.nonfinite_events) +
                            " non-finite steps by step " + std::to_string(step));
    }
    if (cfg.checkpoint_interval > 0 && st.next_step % cfg.checkpoint_interval == 0 &&
        st.next_step < cfg.total_steps) {
      save_state(interval_checkpoint_path(dir, st.next_step), model, opt, st, cfg, source_meta);
    }
  }

  result.final_checkpoint = dir / "final.ckpt";
  save_state(result.final_checkpoint, model, opt, st, cfg, source_meta);
  result.steps_completed = st.next_step;
  result.nonfinite_events = st.nonfinite_events;
  result.final_model = model;
  return result;
}

}  // namespace retrofit
