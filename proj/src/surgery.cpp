// SPDX-License-Identifier: Apache-2.0

#include "retrofit/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "retrofit/errors.hpp"
#include "retrofit/ops.hpp"

namespace retrofit {

void SurgeryPlan::validate() const {
  if (tuple.prelude < 0 || tuple.recurrent < 0 || tuple.coda < 0) {
    throw PlanError("plan: tuple entries must be non-negative");
  }
  if (tuple.recurrent < 1) throw PlanError("plan: the recurrent block needs at least one layer");
  if (tuple.prelude + tuple.recurrent + tuple.coda > donor_depth) {
    throw PlanError("plan: p + r + c exceeds donor depth " + std::to_string(donor_depth));
  }
  auto check = [&](const std::vector<std::int64_t>& layers, std::int64_t expected,
                   const char* part) {
    if (static_cast<std::int64_t>(layers.size()) != expected) {
      throw PlanError(std::string("plan: ") + part + " list length does not match the tuple");
    }
    if (!std::is_sorted(layers.begin(), layers.end())) {
      throw PlanError(std::string("plan: ") + part + " list is not sorted");
    }
    for (auto idx : layers) {
      if (idx < 0 || idx >= donor_depth) {
        throw PlanError(std::string("plan: ") + part + " index " + std::to_string(idx) +
                        " outside [0, " + std::to_string(donor_depth) + ")");
      }
    }
  };
  check(prelude_layers, tuple.prelude, "prelude");
  check(recurrent_layers, tuple.recurrent, "recurrent");
  check(coda_layers, tuple.coda, "coda");
  std::set<std::int64_t> seen;
  for (const auto* list : {&prelude_layers, &recurrent_layers, &coda_layers}) {
    for (auto idx : *list) {
      if (!seen.insert(idx).second) {
        throw PlanError("plan: layer " + std::to_string(idx) + " used more than once");
      }
    }
  }
}

SurgeryPlan make_plan(PlanTuple tuple, std::int64_t donor_depth) {
  if (tuple.prelude < 0 || tuple.recurrent < 0 || tuple.coda < 0 ||
      tuple.prelude + tuple.recurrent + tuple.coda > donor_depth) {
    throw PlanError("plan: (" + std::to_string(tuple.prelude) + "," +
                    std::to_string(tuple.recurrent) + "," + std::to_string(tuple.coda) +
                    ") does not fit a donor of depth " + std::to_string(donor_depth));
  }
  SurgeryPlan plan;
  plan.tuple = tuple;
  plan.donor_depth = donor_depth;
  auto range = [](std::int64_t begin, std::int64_t count) {
    std::vector<std::int64_t> v(static_cast<std::size_t>(count));
    std::iota(v.begin(), v.end(), begin);
    return v;
  };
  const auto coda_begin = donor_depth - tuple.coda;
  plan.prelude_layers = range(0, tuple.prelude);
  plan.recurrent_layers = range(coda_begin - tuple.recurrent, tuple.recurrent);
  plan.coda_layers = range(coda_begin, tuple.coda);
  plan.validate();
  return plan;
}

SurgeryPlan make_plan(std::int64_t donor_depth, std::vector<std::int64_t> prelude_layers,
                      std::vector<std::int64_t> recurrent_layers,
                      std::vector<std::int64_t> coda_layers) {
  SurgeryPlan plan;
  plan.tuple = {static_cast<std::int64_t>(prelude_layers.size()),
                static_cast<std::int64_t>(recurrent_layers.size()),
                static_cast<std::int64_t>(coda_layers.size())};
  plan.donor_depth = donor_depth;
  plan.prelude_layers = std::move(prelude_layers);
  plan.recurrent_layers = std::move(recurrent_layers);
  plan.coda_layers = std::move(coda_layers);
  plan.validate();
  return plan;
}

PlanTuple parse_tuple(const std::string& text) {
  std::string s = text;
  s.erase(std::remove_if(s.begin(), s.end(), [](char c) { return c == '(' || c == ')' || c == ' '; }),
          s.end());
  std::stringstream ss(s);
  std::vector<std::int64_t> parts;
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      parts.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw PlanError("plan: cannot parse tuple '" + text + "'");
    }
  }
  if (parts.size() != 3) throw PlanError("plan: tuple must have three entries: '" + text + "'");
  return {parts[0], parts[1], parts[2]};
}

void to_json(nlohmann::json& j, const SurgeryPlan& p) {
  j = nlohmann::json{{"tuple", {p.tuple.prelude, p.tuple.recurrent, p.tuple.coda}},
                     {"donor_depth", p.donor_depth},
                     {"prelude_layers", p.prelude_layers},
                     {"recurrent_layers", p.recurrent_layers},
                     {"coda_layers", p.coda_layers}};
}

void from_json(const nlohmann::json& j, SurgeryPlan& p) {
  static const std::set<std::string> known{"tuple", "donor_depth", "prelude_layers",
                                           "recurrent_layers", "coda_layers"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw PlanError("plan: unknown key '" + key + "'");
  }
  const auto depth = j.at("donor_depth").get<std::int64_t>();
  if (j.contains("prelude_layers")) {
    p = make_plan(depth, j.at("prelude_layers").get<std::vector<std::int64_t>>(),
                  j.at("recurrent_layers").get<std::vector<std::int64_t>>(),
                  j.at("coda_layers").get<std::vector<std::int64_t>>());
    if (j.contains("tuple")) {
      const auto t = j.at("tuple").get<std::vector<std::int64_t>>();
      if (t.size() != 3 || PlanTuple{t[0], t[1], t[2]} != p.tuple) {
        throw PlanError("plan: tuple disagrees with layer lists");
      }
    }
  } else {
    const auto t = j.at("tuple").get<std::vector<std::int64_t>>();
    if (t.size() != 3) throw PlanError("plan: tuple must have three entries");
    p = make_plan(PlanTuple{t[0], t[1], t[2]}, depth);
  }
}

SurgeryPlan read_plan_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PlanError("cannot open plan file " + path.string());
  try {
    return nlohmann::json::parse(in).get<SurgeryPlan>();
  } catch (const nlohmann::json::exception& e) {
    throw PlanError("plan file " + path.string() + ": " + e.what());
  }
}

void write_plan_file(const std::filesystem::path& path, const SurgeryPlan& plan) {
  std::ofstream out(path);
  out << nlohmann::json(plan).dump(2) << "\n";
  if (!out) throw PlanError("cannot write plan file " + path.string());
}

std::vector<std::int64_t> kept_layers(const SurgeryPlan& plan) {
  std::vector<std::int64_t> out = plan.prelude_layers;
  out.insert(out.end(), plan.recurrent_layers.begin(), plan.recurrent_layers.end());
  out.insert(out.end(), plan.coda_layers.begin(), plan.coda_layers.end());
  return out;
}

RecurrentModel apply_surgery(const FixedModel& donor, const SurgeryPlan& plan,
                             const SurgeryOptions& opts, RandomStream& stream) {
  plan.validate();
  if (plan.donor_depth != static_cast<std::int64_t>(donor.blocks.size())) {
    throw FormatError("surgery: plan expects donor depth " + std::to_string(plan.donor_depth) +
                      ", donor has " + std::to_string(donor.blocks.size()) + " layers");
  }
  const auto& cfg = donor.config;
  RecurrentModel m;
  m.config = cfg;
  m.embedding = donor.embedding;
  m.final_norm = donor.final_norm;
  m.unembedding = donor.unembedding;
  auto take = [&](const std::vector<std::int64_t>& layers) {
    std::vector<BlockWeights> out;
    for (auto idx : layers) out.push_back(donor.blocks[static_cast<std::size_t>(idx)]);
    return out;
  };
  m.prelude = take(plan.prelude_layers);
  m.recurrent = take(plan.recurrent_layers);
  m.coda = take(plan.coda_layers);

  const auto h = cfg.hidden;
  if (opts.adapter_init == AdapterInit::identity_pass) {
    if (!(opts.noise_std >= 0.0)) throw ContractError("surgery: noise std must be non-negative");
    std::vector<double> a(static_cast<std::size_t>(2 * h * h), 0.0);
    for (std::int64_t j = 0; j < h; ++j) a[(h + j) * h + j] = 1.0;
    if (opts.noise_std > 0.0) {
      for (auto& v : a) v += opts.noise_std * stream.normal();
    }
    m.adapter = Tensor({2 * h, h}, std::move(a));
  } else {
    m.adapter = draw_normal(stream, {2 * h, h}, 0.0, default_init_std(cfg));
  }
  return m;
}

Checkpoint apply_surgery(const Checkpoint& donor, const SurgeryPlan& plan,
                         const SurgeryOptions& opts, RandomStream& stream) {
  const FixedModel fixed = fixed_from_checkpoint(donor);
  Checkpoint out = to_checkpoint(apply_surgery(fixed, plan, opts, stream));
  out.metadata["plan"] = plan;
  out.metadata["adapter_init"] =
      opts.adapter_init == AdapterInit::identity_pass ? "identity-pass" : "scaled-random";
  out.metadata["adapter_noise_std"] = opts.noise_std;
  return out;
}

FixedModel prune_to_layers(const FixedModel& donor, std::span<const std::int64_t> layers) {
  FixedModel m = donor;
  m.blocks.clear();
  for (auto idx : layers) {
    if (idx < 0 || idx >= static_cast<std::int64_t>(donor.blocks.size())) {
      throw PlanError("prune: layer index " + std::to_string(idx) + " out of range");
    }
    m.blocks.push_back(donor.blocks[static_cast<std::size_t>(idx)]);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Parameter accounting

std::int64_t block_parameter_count(const ModelConfig& cfg) {
  const auto h = cfg.hidden, kv = cfg.kv_width(), f = cfg.ffn;
  std::int64_t n = 2 * h * h + 2 * h * kv;  // q, o, k, v
  n += 3 * h * f;                           // gate, up, down
  n += 2 * h;                               // two norms
  if (cfg.qk_norm) n += h + kv;
  return n;
}

ParamReport count_parameters(const ModelConfig& cfg, PlanTuple tuple, CountConvention convention) {
  const auto per_block = block_parameter_count(cfg);
  ParamReport r;
  r.convention = convention;
  r.embeddings = cfg.vocab_size * cfg.hidden * (cfg.tie_embeddings ? 1 : 2);
  r.prelude = tuple.prelude * per_block;
  r.recurrent_block = tuple.recurrent * per_block;
  r.coda = tuple.coda * per_block;
  r.adapter = 2 * cfg.hidden * cfg.hidden;
  r.final_norm = cfg.hidden;
  r.body = r.prelude + r.recurrent_block + r.coda;
  if (convention == CountConvention::full) r.body += r.adapter + r.final_norm;
  return r;
}

FixedParamReport count_fixed_parameters(const ModelConfig& cfg, std::int64_t depth) {
  return {cfg.vocab_size * cfg.hidden * (cfg.tie_embeddings ? 1 : 2),
          depth * block_parameter_count(cfg) + cfg.hidden};
}

// ---------------------------------------------------------------------------
// Block influence

std::vector<double> block_influence_scores(const FixedModel& donor,
                                           std::span<const std::int32_t> tokens,
                                           std::int64_t seq_len) {
  if (tokens.empty()) throw InputError("block influence: calibration batch is empty");
  NoGradScope no_grad;
  Tensor x = embedding(donor.embedding, tokens);
  const auto rows = x.dim(0), h = x.dim(1);
  std::vector<double> scores;
  for (const auto& block : donor.blocks) {
    Tensor y = decoder_block(x, block, donor.config, seq_len);
    auto xs = x.data(), ys = y.data();
    double total = 0.0;
    for (std::int64_t i = 0; i < rows; ++i) {
      double dot = 0.0, nx = 0.0, ny = 0.0;
      for (std::int64_t j = 0; j < h; ++j) {
        const double a = xs[i * h + j], b = ys[i * h + j];
        dot += a * b;
        nx += a * a;
        ny += b * b;
      }
      const double denom = std::sqrt(nx) * std::sqrt(ny);
      total += denom > 0.0 ? dot / denom : 1.0;
    }
    scores.push_back(1.0 - total / static_cast<double>(rows));
    x = y;
  }
  return scores;
}

}  // namespace retrofit

namespace retrofit {

std::vector<std::string> preset_names() { return {"tinyllama", "llama", "olmo"}; }

DonorPreset donor_preset(const std::string& name) {
  DonorPreset p;
  p.name = name;
  ModelConfig& c = p.config;
  c.hidden = 2048;
  c.head_dim = 64;
  c.context_length = 2048;
  if (name == "tinyllama") {
    c.vocab_size = 32000;
    c.n_heads = 32;
    c.n_kv_heads = 4;
    c.ffn = 5632;
    p.depth = 22;
  } else if (name == "llama") {
    c.vocab_size = 128256;
    c.n_heads = 32;
    c.n_kv_heads = 8;
    c.ffn = 8192;
    c.rope_base = 500000.0;
    p.depth = 16;
  } else if (name == "olmo") {
    c.vocab_size = 100352;
    c.n_heads = 16;
    c.n_kv_heads = 16;
    c.head_dim = 128;
    c.ffn = 8192;
    c.rope_base = 500000.0;
    c.qk_norm = true;
    c.post_norm = true;
    p.depth = 16;
  } else {
    throw InputError("unknown preset '" + name + "'");
  }
  return p;
}

}  // namespace retrofit
