// SPDX-License-Identifier: Apache-2.0
//
// AdamW, the AdamW* variant (no epsilon, per-tensor update clipping,
// lr-independent decoupled weight decay) and Muon, plus global gradient
// clipping. Parameters are updated by replacing their tensor value.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "retrofit/checkpoint.hpp"
#include "retrofit/model.hpp"
#include "retrofit/tensor.hpp"

namespace retrofit {

struct ParamSlot {
  std::string name;
  Tensor* value;
  ParamRole role;
};

template <typename Model>
std::vector<ParamSlot> parameter_slots(Model& model) {
  std::vector<ParamSlot> slots;
  for_each_parameter(model, [&](const std::string& name, Tensor& t, ParamRole role) {
    slots.push_back(ParamSlot{name, &t, role});
  });
  return slots;
}

struct ClipResult {
  double norm = 0.0;  // before clipping
  bool clipped = false;
};

// Scales every gradient by max_norm / g when the global L2 norm g exceeds
// max_norm. Throws NonFiniteError when g is not finite.
ClipResult clip_global_norm(std::span<Tensor> grads, double max_norm = 1.0);

enum class DecayMode {
  // p <- p * (1 - lr * wd)
  lr_scaled,
  // p <- p * (1 - wd)
  independent,
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  DecayMode decay = DecayMode::lr_scaled;
};

struct AdamWStarSpec {
  // Per-tensor RMS ceiling on the normalized update.
  double update_clip = 1.0;
  DecayMode decay = DecayMode::independent;
};

struct MomentState {
  std::vector<double> m;
  std::vector<double> v;
};

struct AdamWState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::map<std::string, MomentState> moments;
};

// Each step returns false, leaving parameters and state untouched, when any
// gradient is non-finite.
bool adamw_step(AdamWState& state, std::span<const ParamSlot> params,
                std::span<const Tensor> grads, double lr);
bool adamw_star_step(AdamWState& state, const AdamWStarSpec& spec,
                     std::span<const ParamSlot> params, std::span<const Tensor> grads, double lr);

inline constexpr double kNewtonSchulzA = 3.4445;
inline constexpr double kNewtonSchulzB = -4.7750;
inline constexpr double kNewtonSchulzC = 2.0315;

// Quintic Newton-Schulz iteration towards the orthogonal polar factor.
Tensor newton_schulz5(const Tensor& g, int steps = 5);

struct MuonConfig {
  double momentum = 0.95;
  bool nesterov = true;
  int ns_steps = 5;
  double weight_decay = 1e-4;
  // Non-matrix and (un)embedding tensors use AdamW at lr * fallback_lr_scale.
  AdamWConfig fallback;
  double fallback_lr_scale = 1.0;
};

struct MuonState {
  MuonConfig config;
  std::map<std::string, std::vector<double>> momentum;
  AdamWState fallback;
};

MuonState make_muon_state(const MuonConfig& cfg);
bool muon_step(MuonState& state, std::span<const ParamSlot> params,
               std::span<const Tensor> grads, double lr);

enum class OptimizerKind { adamw, adamw_star, muon };
std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& text);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::muon;
  AdamWConfig adamw;
  AdamWStarSpec adamw_star;
  MuonConfig muon;
};

// Uniform front end over the three update rules, with checkpointable state.
class Optimizer {
 public:
  explicit Optimizer(const OptimizerConfig& cfg);

  bool step(std::span<const ParamSlot> params, std::span<const Tensor> grads, double lr);
  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);

 private:
  OptimizerConfig config_;
  AdamWState adam_;
  MuonState muon_;
};

}  // namespace retrofit
