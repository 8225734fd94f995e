// SPDX-License-Identifier: Apache-2.0

#include "retrofit/config.hpp"

#include <cstdlib>
#include <fstream>

#include "retrofit/errors.hpp"
#include "retrofit/json_io.hpp"

namespace retrofit {

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
  j = json{{"vocab_size", c.vocab_size},
           {"hidden", c.hidden},
           {"n_heads", c.n_heads},
           {"n_kv_heads", c.n_kv_heads},
           {"head_dim", c.head_dim},
           {"ffn", c.ffn},
           {"context_length", c.context_length},
           {"rope_base", c.rope_base},
           {"norm_eps", c.norm_eps},
           {"sigma_s0", c.sigma_s0},
           {"tie_embeddings", c.tie_embeddings},
           {"qk_norm", c.qk_norm},
           {"post_norm", c.post_norm}};
}

void from_json(const json& j, ModelConfig& c) {
  json base;
  to_json(base, ModelConfig{});
  for (const auto& [key, _] : j.items()) {
    if (!base.contains(key)) throw ConfigError("model config: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("vocab_size", c.vocab_size);
  get("hidden", c.hidden);
  get("n_heads", c.n_heads);
  get("n_kv_heads", c.n_kv_heads);
  get("head_dim", c.head_dim);
  get("ffn", c.ffn);
  get("context_length", c.context_length);
  get("rope_base", c.rope_base);
  get("norm_eps", c.norm_eps);
  get("sigma_s0", c.sigma_s0);
  get("tie_embeddings", c.tie_embeddings);
  get("qk_norm", c.qk_norm);
  get("post_norm", c.post_norm);
}

namespace {

std::string decay_name(DecayMode m) { return m == DecayMode::lr_scaled ? "lr-scaled" : "independent"; }

DecayMode parse_decay(const std::string& s) {
  if (s == "lr-scaled") return DecayMode::lr_scaled;
  if (s == "independent") return DecayMode::independent;
  throw ConfigError("unknown weight-decay mode '" + s + "'");
}

json curriculum_json(const CurriculumSpec& c) {
  return {{"shape", to_string(c.shape)}, {"target", c.target}, {"warmup_steps", c.warmup_steps},
          {"clamp_min", c.clamp_min}};
}

CurriculumSpec curriculum_from(const json& j) {
  CurriculumSpec c;
  c.shape = parse_curriculum_shape(j.at("shape").get<std::string>());
  c.target = j.at("target").get<std::int64_t>();
  c.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
  c.clamp_min = j.at("clamp_min").get<std::int64_t>();
  return c;
}

std::string value_type(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

void check_type(const json& base, const json& value, const std::string& path) {
  const bool ok = (base.is_boolean() && value.is_boolean()) ||
                  (base.is_number_integer() && value.is_number_integer()) ||
                  (base.is_number_float() && value.is_number()) ||
                  (base.is_string() && value.is_string()) || (base.is_array() && value.is_array()) ||
                  (base.is_object() && value.is_object());
  if (!ok) {
    throw ConfigError("config key '" + path + "': expected " + value_type(base) + ", got " +
                      value_type(value));
  }
}

// Copies `user` into `base`, rejecting keys `base` does not have.
void merge_strict(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config" + (path.empty() ? "" : " key '" + path + "'") +
                                           ": expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string sub = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + sub + "'");
    check_type(base[key], value, sub);
    if (value.is_object() && !base[key].empty()) {
      merge_strict(base[key], value, sub);
    } else {
      base[key] = value;
    }
  }
}

void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) {
      throw ConfigError("unknown config key '" + path + "'");
    }
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;  // bare words are strings
  }
  if (node->is_string() && !value.is_string()) value = text;
  check_type(*node, value, path);
  if (value.is_object()) {
    merge_strict(*node, value, path);
  } else {
    *node = value;
  }
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.model_config.context_length = 64;
  c.optimizer.muon.fallback_lr_scale = 0.1;
  c.data.datasets = {"arith"};
  c.data.phases = {Phase{{1.0}, 0, -1}};
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["model_config"] = c.model_config;
  j["model"] = {{"kind", c.model.kind == ModelKind::fixed ? "fixed" : "recurrent"},
                {"checkpoint", c.model.checkpoint},
                {"depth", c.model.depth},
                {"plan", {c.model.plan.prelude, c.model.plan.recurrent, c.model.plan.coda}},
                {"emb_scale", c.model.emb_scale}};
  const auto& o = c.optimizer;
  j["optimizer"] = {
      {"kind", to_string(o.kind)},
      {"adamw",
       {{"beta1", o.adamw.beta1},
        {"beta2", o.adamw.beta2},
        {"eps", o.adamw.eps},
        {"weight_decay", o.adamw.weight_decay},
        {"decay", decay_name(o.adamw.decay)}}},
      {"adamw_star", {{"update_clip", o.adamw_star.update_clip}, {"decay", decay_name(o.adamw_star.decay)}}},
      {"muon",
       {{"momentum", o.muon.momentum},
        {"nesterov", o.muon.nesterov},
        {"ns_steps", o.muon.ns_steps},
        {"weight_decay", o.muon.weight_decay},
        {"fallback_lr_scale", o.muon.fallback_lr_scale}}}};
  j["lr"] = {{"peak", c.lr.peak},
             {"warmup_steps", c.lr.warmup_steps},
             {"stable_steps", c.lr.stable_steps},
             {"decay_steps", c.lr.decay_steps}};
  j["depth"] = {{"spread", c.depth_spread}};
  j["curriculum"] = curriculum_json(c.curriculum);
  j["window"] = curriculum_json(c.window);
  j["batch"] = {{"micro", c.micro_batch}, {"global", c.global_batch}};
  j["total_steps"] = c.total_steps;
  j["seed"] = c.seed;
  j["clip_norm"] = c.clip_norm;
  json phases = json::array();
  for (const auto& p : c.data.phases) {
    phases.push_back({{"weights", p.weights}, {"begin", p.begin}, {"end", p.end}});
  }
  j["data"] = {{"datasets", c.data.datasets}, {"phases", phases}};
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["max_nonfinite"] = c.max_nonfinite;
  j["output_dir"] = c.output_dir;
  j["resume"] = c.resume;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  try {
    RunConfig c;
    c.model_config = j.at("model_config").get<ModelConfig>();
    const auto& m = j.at("model");
    const auto kind = m.at("kind").get<std::string>();
    if (kind != "fixed" && kind != "recurrent") {
      throw ConfigError("config key 'model.kind': expected 'fixed' or 'recurrent'");
    }
    c.model.kind = kind == "fixed" ? ModelKind::fixed : ModelKind::recurrent;
    c.model.checkpoint = m.at("checkpoint").get<std::string>();
    c.model.depth = m.at("depth").get<std::int64_t>();
    const auto plan = m.at("plan").get<std::vector<std::int64_t>>();
    if (plan.size() != 3) throw ConfigError("config key 'model.plan': expected three entries");
    c.model.plan = {plan[0], plan[1], plan[2]};
    c.model.emb_scale = m.at("emb_scale").get<double>();

    const auto& o = j.at("optimizer");
    c.optimizer.kind = parse_optimizer_kind(o.at("kind").get<std::string>());
    const auto& aw = o.at("adamw");
    c.optimizer.adamw = {aw.at("beta1").get<double>(), aw.at("beta2").get<double>(),
                         aw.at("eps").get<double>(), aw.at("weight_decay").get<double>(),
                         parse_decay(aw.at("decay").get<std::string>())};
    const auto& as = o.at("adamw_star");
    c.optimizer.adamw_star = {as.at("update_clip").get<double>(),
                              parse_decay(as.at("decay").get<std::string>())};
    const auto& mu = o.at("muon");
    c.optimizer.muon.momentum = mu.at("momentum").get<double>();
    c.optimizer.muon.nesterov = mu.at("nesterov").get<bool>();
    c.optimizer.muon.ns_steps = mu.at("ns_steps").get<int>();
    c.optimizer.muon.weight_decay = mu.at("weight_decay").get<double>();
    c.optimizer.muon.fallback_lr_scale = mu.at("fallback_lr_scale").get<double>();
    c.optimizer.muon.fallback = c.optimizer.adamw;

    const auto& lr = j.at("lr");
    c.lr = {lr.at("peak").get<double>(), lr.at("warmup_steps").get<std::int64_t>(),
            lr.at("stable_steps").get<std::int64_t>(), lr.at("decay_steps").get<std::int64_t>()};
    c.depth_spread = j.at("depth").at("spread").get<double>();
    c.curriculum = curriculum_from(j.at("curriculum"));
    c.window = curriculum_from(j.at("window"));
    c.micro_batch = j.at("batch").at("micro").get<std::int64_t>();
    c.global_batch = j.at("batch").at("global").get<std::int64_t>();
    c.total_steps = j.at("total_steps").get<std::int64_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.clip_norm = j.at("clip_norm").get<double>();
    const auto& d = j.at("data");
    c.data.datasets = d.at("datasets").get<std::vector<std::string>>();
    c.data.phases.clear();
    for (const auto& p : d.at("phases")) {
      for (const auto& [key, _] : p.items()) {
        if (key != "weights" && key != "begin" && key != "end") {
          throw ConfigError("unknown config key 'data.phases[]." + key + "'");
        }
      }
      c.data.phases.push_back(Phase{p.at("weights").get<std::vector<double>>(),
                                    p.value("begin", std::int64_t{0}), p.at("end").get<std::int64_t>()});
    }
    // An open-ended final phase runs to the end of training.
    if (!c.data.phases.empty() && c.data.phases.back().end < 0) {
      c.data.phases.back().end = c.total_steps;
    }
    c.checkpoint_interval = j.at("checkpoint_interval").get<std::int64_t>();
    c.max_nonfinite = j.at("max_nonfinite").get<std::int64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    c.resume = j.at("resume").get<std::string>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

void RunConfig::validate() const {
  try {
    model_config.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("config key 'model_config': ") + e.what());
  }
  if (micro_batch < 1 || global_batch < 1 || global_batch % micro_batch != 0) {
    throw ConfigError("config key 'batch': global batch must be a positive multiple of micro batch");
  }
  if (total_steps < 0) throw ConfigError("config key 'total_steps' must be >= 0");
  if (!(clip_norm > 0.0)) throw ConfigError("config key 'clip_norm' must be positive");
  if (curriculum.target < 1) throw ConfigError("config key 'curriculum.target' must be >= 1");
  if (window.target < 1) throw ConfigError("config key 'window.target' must be >= 1");
  if (curriculum.warmup_steps < 0 || window.warmup_steps < 0) {
    throw ConfigError("config: curriculum warmup steps must be >= 0");
  }
  if (!(depth_spread >= 0.0)) throw ConfigError("config key 'depth.spread' must be >= 0");
  if (!(lr.peak >= 0.0) || lr.warmup_steps < 0 || lr.stable_steps < 0 || lr.decay_steps < 0) {
    throw ConfigError("config key 'lr': rates and step counts must be non-negative");
  }
  if (model.depth < 0) throw ConfigError("config key 'model.depth' must be >= 0");
  if (model.plan.prelude < 0 || model.plan.recurrent < 1 || model.plan.coda < 0) {
    throw ConfigError("config key 'model.plan': recurrent block needs at least one layer");
  }
  if (!(model.emb_scale > 0.0)) throw ConfigError("config key 'model.emb_scale' must be positive");
  if (max_nonfinite < 0) throw ConfigError("config key 'max_nonfinite' must be >= 0");
  if (checkpoint_interval < 0) throw ConfigError("config key 'checkpoint_interval' must be >= 0");
  if (total_steps > 0) data.validate(total_steps);
}

RunConfig resolve_config(const json& user, const std::vector<std::string>& overrides) {
  json merged = to_json(default_run_config());
  merge_strict(merged, user, "");
  for (const auto& o : overrides) apply_override(merged, o);
  return run_config_from_json(merged);
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json user;
  try {
    user = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " does not parse: " + e.what());
  }
  return resolve_config(user, overrides);
}

std::filesystem::path resolve_output_dir(const RunConfig& cfg) {
  std::filesystem::path dir(cfg.output_dir);
  if (dir.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) {
      return std::filesystem::path(root) / dir;
    }
  }
  return dir;
}

}  // namespace retrofit
