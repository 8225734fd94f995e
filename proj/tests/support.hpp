// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures and finite-difference oracles for the test suites.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "retrofit/model.hpp"
#include "retrofit/ops.hpp"
#include "retrofit/random.hpp"
#include "retrofit/tensor.hpp"

namespace retrofit::testing {

// Small but complete: GQA (4 query heads over 2 kv heads) and SwiGLU.
inline ModelConfig tiny_config(std::int64_t hidden = 16) {
  ModelConfig c;
  c.vocab_size = 11;
  c.hidden = hidden;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = hidden / 4;
  c.ffn = hidden + hidden / 2;
  c.context_length = 8;
  return c;
}

inline std::vector<std::int32_t> random_tokens(std::size_t n, std::int64_t vocab, std::uint64_t seed) {
  RandomStream s(seed, "tokens");
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = static_cast<std::int32_t>(s.next_u64() % static_cast<std::uint64_t>(vocab));
  return out;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double std = 1.0) {
  RandomStream s(seed, "tensor");
  return draw_normal(s, std::move(shape), 0.0, std);
}

inline Tensor with_value(const Tensor& t, std::size_t i, double v) {
  std::vector<double> d(t.data().begin(), t.data().end());
  d[i] = v;
  return Tensor(t.shape(), std::move(d));
}

// |a - n| / max(|a|, |n|, floor): relative error, judged in absolute terms
// for entries below `floor`.
inline double rel_error(double a, double n, double floor = 1e-5) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double max_abs_grad = 0.0;
};

// Central differences over every input element of a scalar function.
template <typename F>
GradCheck check_inputs(const std::vector<Tensor>& inputs, F&& f, double eps = 1e-6) {
  Tape tape;
  std::vector<Tensor> watched;
  for (const auto& t : inputs) watched.push_back(tape.watch(t));
  Gradients g;
  {
    TapeScope scope(tape);
    g = backward(f(watched), tape);
  }
  GradCheck out;
  NoGradScope none;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = g.of_or_zero(watched[k]);
    for (std::size_t i = 0; i < static_cast<std::size_t>(inputs[k].size()); ++i) {
      auto probe = inputs;
      const double x = inputs[k].data()[i];
      probe[k] = with_value(inputs[k], i, x + eps);
      const double up = f(probe).item();
      probe[k] = with_value(inputs[k], i, x - eps);
      const double down = f(probe).item();
      const double numeric = (up - down) / (2 * eps);
      out.max_rel_error = std::max(out.max_rel_error, rel_error(analytic.data()[i], numeric));
      out.max_abs_grad = std::max(out.max_abs_grad, std::abs(analytic.data()[i]));
      ++out.checked;
    }
  }
  return out;
}

// Analytic parameter gradients of `loss(model)`, in for_each_parameter order.
template <typename Model, typename F>
std::vector<Tensor> parameter_gradients(const Model& model, F&& loss) {
  Tape tape;
  Model bound = watch_parameters(model, tape);
  Gradients g;
  {
    TapeScope scope(tape);
    g = backward(loss(bound), tape);
  }
  std::vector<Tensor> out;
  for_each_parameter(bound, [&](const std::string&, Tensor& t, ParamRole) { out.push_back(g.of_or_zero(t)); });
  return out;
}

// Central differences over every parameter element of a model.
template <typename Model, typename F>
GradCheck check_parameters(const Model& model, F&& loss, double eps = 1e-5) {
  const auto analytic = parameter_gradients(model, loss);
  GradCheck out;
  NoGradScope none;
  Model probe = model;
  std::size_t slot = 0;
  for_each_parameter(probe, [&](const std::string&, Tensor& t, ParamRole) {
    const Tensor original = t;
    for (std::size_t i = 0; i < static_cast<std::size_t>(original.size()); ++i) {
      const double x = original.data()[i];
      t = with_value(original, i, x + eps);
      const double up = loss(probe).item();
      t = with_value(original, i, x - eps);
      const double down = loss(probe).item();
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[slot].data()[i];
      out.max_rel_error = std::max(out.max_rel_error, rel_error(a, numeric));
      out.max_abs_grad = std::max(out.max_abs_grad, std::abs(a));
      ++out.checked;
    }
    t = original;
    ++slot;
  });
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("retrofit_tests_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace retrofit::testing
