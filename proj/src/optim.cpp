// SPDX-License-Identifier: Apache-2.0

#include "retrofit/optim.hpp"

#include <algorithm>
#include <cmath>

#include "retrofit/errors.hpp"
#include "retrofit/kernels.hpp"

namespace retrofit {
namespace {

void check_shapes(std::span<const ParamSlot> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: one gradient per parameter");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value->shape() != grads[i].shape()) {
      throw ShapeError("optimizer: gradient shape mismatch for " + params[i].name);
    }
  }
}

bool grads_finite(std::span<const Tensor> grads) {
  return std::all_of(grads.begin(), grads.end(), [](const Tensor& g) { return all_finite(g); });
}

double decay_factor(DecayMode mode, double lr, double wd) {
  return mode == DecayMode::lr_scaled ? 1.0 - lr * wd : 1.0 - wd;
}

MomentState& moments_for(AdamWState& state, const ParamSlot& p) {
  auto& ms = state.moments[p.name];
  if (ms.m.empty()) {
    ms.m.assign(static_cast<std::size_t>(p.value->size()), 0.0);
    ms.v.assign(ms.m.size(), 0.0);
  }
  return ms;
}

// Shared AdamW / AdamW* core over an arbitrary subset of parameters.
void adam_update(AdamWState& state, const AdamWStarSpec* star,
                 std::span<const ParamSlot> params, std::span<const Tensor> grads,
                 std::span<const std::size_t> which, double lr) {
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto i : which) {
    const auto& p = params[i];
    auto g = grads[i].data();
    auto& ms = moments_for(state, p);
    auto w = p.value->data();
    std::vector<double> update(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) {
      ms.m[k] = c.beta1 * ms.m[k] + (1.0 - c.beta1) * g[k];
      ms.v[k] = c.beta2 * ms.v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double mhat = ms.m[k] / bc1;
      const double denom = std::sqrt(ms.v[k] / bc2);
      if (star) {
        update[k] = denom > 0.0 ? mhat / denom : 0.0;
      } else {
        update[k] = mhat / (denom + c.eps);
      }
    }
    double factor = 1.0;
    DecayMode mode = c.decay;
    if (star) {
      double ss = 0.0;
      for (double u : update) ss += u * u;
      const double rms = std::sqrt(ss / static_cast<double>(update.size()));
      if (rms > star->update_clip) factor = star->update_clip / rms;
      mode = star->decay;
    }
    const double keep = decay_factor(mode, lr, c.weight_decay);
    std::vector<double> next(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) next[k] = w[k] * keep - lr * factor * update[k];
    *p.value = Tensor(p.value->shape(), std::move(next));
  }
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

}  // namespace

ClipResult clip_global_norm(std::span<Tensor> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractError("clip_global_norm: max_norm must be positive");
  double ss = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) ss += v * v;
  const double norm = std::sqrt(ss);
  if (!std::isfinite(norm)) throw NonFiniteError("gradient norm is not finite");
  ClipResult result{norm, false};
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      std::vector<double> scaled(g.data().begin(), g.data().end());
      for (auto& v : scaled) v *= s;
      g = Tensor(g.shape(), std::move(scaled));
    }
    result.clipped = true;
  }
  return result;
}

bool adamw_step(AdamWState& state, std::span<const ParamSlot> params,
                std::span<const Tensor> grads, double lr) {
  check_shapes(params, grads);
  if (!grads_finite(grads)) return false;
  const auto idx = all_indices(params.size());
  adam_update(state, nullptr, params, grads, idx, lr);
  return true;
}

bool adamw_star_step(AdamWState& state, const AdamWStarSpec& spec,
                     std::span<const ParamSlot> params, std::span<const Tensor> grads, double lr) {
  if (!(spec.update_clip > 0.0)) throw ContractError("AdamW*: update clip must be positive");
  check_shapes(params, grads);
  if (!grads_finite(grads)) return false;
  const auto idx = all_indices(params.size());
  adam_update(state, &spec, params, grads, idx, lr);
  return true;
}

Tensor newton_schulz5(const Tensor& g, int steps) {
  if (g.rank() != 2) throw ShapeError("newton_schulz5: expected a matrix");
  double ss = 0.0;
  for (double v : g.data()) ss += v * v;
  if (ss == 0.0) return Tensor::zeros(g.shape());
  const bool transpose = g.dim(0) > g.dim(1);
  const std::int64_t rows = transpose ? g.dim(1) : g.dim(0);
  const std::int64_t cols = transpose ? g.dim(0) : g.dim(1);
  const double inv = 1.0 / (std::sqrt(ss) + 1e-7);
  auto src = g.data();
  std::vector<double> x(static_cast<std::size_t>(rows * cols));
  for (std::int64_t i = 0; i < g.dim(0); ++i) {
    for (std::int64_t j = 0; j < g.dim(1); ++j) {
      const double v = src[i * g.dim(1) + j] * inv;
      if (transpose) x[j * cols + i] = v;
      else x[i * cols + j] = v;
    }
  }
  const auto& k = kernels::active();
  std::vector<double> gram(static_cast<std::size_t>(rows * rows));
  std::vector<double> gram2(gram.size());
  std::vector<double> poly(gram.size());
  std::vector<double> next(x.size());
  for (int it = 0; it < steps; ++it) {
    k.gemm_nt(x.data(), x.data(), gram.data(), rows, cols, rows, false);       // A = X X^T
    k.gemm_nn(gram.data(), gram.data(), gram2.data(), rows, rows, rows, false);  // A A
    for (std::size_t t = 0; t < poly.size(); ++t)
      poly[t] = kNewtonSchulzB * gram[t] + kNewtonSchulzC * gram2[t];
    k.gemm_nn(poly.data(), x.data(), next.data(), rows, rows, cols, false);      // B X
    for (std::size_t t = 0; t < x.size(); ++t) x[t] = kNewtonSchulzA * x[t] + next[t];
  }
  if (!transpose) return Tensor(g.shape(), std::move(x));
  std::vector<double> out(x.size());
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
  return Tensor(g.shape(), std::move(out));
}

MuonState make_muon_state(const MuonConfig& cfg) {
  MuonState s;
  s.config = cfg;
  s.fallback.config = cfg.fallback;
  return s;
}

bool muon_step(MuonState& state, std::span<const ParamSlot> params,
               std::span<const Tensor> grads, double lr) {
  check_shapes(params, grads);
  if (!grads_finite(grads)) return false;
  const auto& c = state.config;
  std::vector<std::size_t> fallback;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (p.role != ParamRole::matrix || p.value->rank() != 2) {
      fallback.push_back(i);
      continue;
    }
    auto g = grads[i].data();
    auto& buf = state.momentum[p.name];
    if (buf.empty()) buf.assign(g.size(), 0.0);
    std::vector<double> eff(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
      buf[k] = c.momentum * buf[k] + g[k];
      eff[k] = c.nesterov ? g[k] + c.momentum * buf[k] : buf[k];
    }
    const Tensor ortho = newton_schulz5(Tensor(p.value->shape(), std::move(eff)), c.ns_steps);
    const double r = static_cast<double>(p.value->dim(0));
    const double cl = static_cast<double>(p.value->dim(1));
    const double aspect = std::sqrt(std::max(r, cl) / std::min(r, cl));
    const double keep = 1.0 - lr * c.weight_decay;
    auto w = p.value->data();
    auto o = ortho.data();
    std::vector<double> next(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) next[k] = w[k] * keep - lr * aspect * o[k];
    *p.value = Tensor(p.value->shape(), std::move(next));
  }
  if (!fallback.empty()) {
    adam_update(state.fallback, nullptr, params, grads, fallback, lr * c.fallback_lr_scale);
  }
  return true;
}

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::adamw: return "adamw";
    case OptimizerKind::adamw_star: return "adamw-star";
    case OptimizerKind::muon: return "muon";
  }
  return "?";
}

OptimizerKind parse_optimizer_kind(const std::string& text) {
  if (text == "adamw") return OptimizerKind::adamw;
  if (text == "adamw-star" || text == "adamw*") return OptimizerKind::adamw_star;
  if (text == "muon") return OptimizerKind::muon;
  throw ConfigError("unknown optimizer '" + text + "'");
}

Optimizer::Optimizer(const OptimizerConfig& cfg) : config_(cfg), muon_(make_muon_state(cfg.muon)) {
  adam_.config = cfg.adamw;
}

bool Optimizer::step(std::span<const ParamSlot> params, std::span<const Tensor> grads,
                     double lr) {
  switch (config_.kind) {
    case OptimizerKind::adamw: return adamw_step(adam_, params, grads, lr);
    case OptimizerKind::adamw_star: return adamw_star_step(adam_, config_.adamw_star, params, grads, lr);
    case OptimizerKind::muon: return muon_step(muon_, params, grads, lr);
  }
  return false;
}

namespace {

void save_moments(const AdamWState& s, const std::string& prefix, Checkpoint& ckpt) {
  for (const auto& [name, ms] : s.moments) {
    const Shape shape{static_cast<std::int64_t>(ms.m.size())};
    ckpt.put(prefix + ".m/" + name, Tensor(shape, ms.m));
    ckpt.put(prefix + ".v/" + name, Tensor(shape, ms.v));
  }
}

void load_moments(AdamWState& s, const std::string& prefix, const Checkpoint& ckpt) {
  s.moments.clear();
  const std::string mkey = prefix + ".m/";
  for (const auto& [name, t] : ckpt.tensors()) {
    if (name.rfind(mkey, 0) != 0) continue;
    const auto param = name.substr(mkey.size());
    auto& ms = s.moments[param];
    ms.m.assign(t.data().begin(), t.data().end());
    const auto& v = ckpt.get(prefix + ".v/" + param);
    ms.v.assign(v.data().begin(), v.data().end());
  }
}

}  // namespace

void Optimizer::save(Checkpoint& ckpt) const {
  nlohmann::json meta{{"kind", to_string(config_.kind)},
                      {"adam_step", adam_.step},
                      {"fallback_step", muon_.fallback.step}};
  ckpt.metadata["optimizer"] = meta;
  save_moments(adam_, "optim.adam", ckpt);
  save_moments(muon_.fallback, "optim.fallback", ckpt);
  for (const auto& [name, buf] : muon_.momentum) {
    ckpt.put("optim.momentum/" + name, Tensor({static_cast<std::int64_t>(buf.size())}, buf));
  }
}

void Optimizer::load(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("optimizer")) throw FormatError("checkpoint has no optimizer state");
  const auto& meta = ckpt.metadata["optimizer"];
  if (meta.at("kind").get<std::string>() != to_string(config_.kind)) {
    throw FormatError("checkpoint optimizer kind does not match the run config");
  }
  adam_.step = meta.at("adam_step").get<std::int64_t>();
  muon_.fallback.step = meta.at("fallback_step").get<std::int64_t>();
  load_moments(adam_, "optim.adam", ckpt);
  load_moments(muon_.fallback, "optim.fallback", ckpt);
  muon_.momentum.clear();
  const std::string key = "optim.momentum/";
  for (const auto& [name, t] : ckpt.tensors()) {
    if (name.rfind(key, 0) == 0) {
      muon_.momentum[name.substr(key.size())].assign(t.data().begin(), t.data().end());
    }
  }
}

}  // namespace retrofit
