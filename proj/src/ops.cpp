// SPDX-License-Identifier: Apache-2.0

#include "retrofit/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <utility>
#include <vector>

#include "retrofit/errors.hpp"
#include "retrofit/kernels.hpp"

namespace retrofit {
namespace {

std::atomic<bool> g_finite_checks{false};

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

// Wraps up an op: optional finiteness check, then a tape record when any
// operand is tracked by the active tape.
template <typename Fn>
Tensor finish(const char* op, Tensor out, std::initializer_list<const Tensor*> inputs,
              Fn&& backward_rule) {
  if (g_finite_checks.load(std::memory_order_relaxed) && !all_finite(out)) {
    throw NonFiniteError(std::string(op) + ": non-finite output");
  }
  const bool tracked =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return needs_grad(*t); });
  if (!tracked) return out;
  std::vector<const Tensor*> in(inputs);
  for (const Tensor* t : in) {
    // Operands tracked on some other (inactive) tape would silently lose
    // their gradient.
    if (t->node() && !needs_grad(*t)) throw ContractError(std::string(op) + ": stale operand");
  }
  return active_tape()->record(std::move(out), in, BackwardFn(std::forward<Fn>(backward_rule)));
}

std::vector<double> buffer(std::int64_t n) { return std::vector<double>(static_cast<std::size_t>(n)); }

}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks() { return g_finite_checks.load(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  auto c = buffer(m * n);
  kernels::active().gemm_nn(a.raw(), b.raw(), c.data(), m, k, n, false);
  return finish("matmul", Tensor({m, n}, std::move(c)), {&a, &b},
                [a, b, m, k, n](std::span<const double> g, std::span<std::span<double>> gi) {
                  const auto& kern = kernels::active();
                  if (!gi[0].empty()) kern.gemm_nt(g.data(), b.raw(), gi[0].data(), m, n, k, true);
                  if (!gi[1].empty()) kern.gemm_tn(a.raw(), g.data(), gi[1].data(), k, m, n, true);
                });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner extents differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + "^T");
  }
  auto c = buffer(m * n);
  kernels::active().gemm_nt(a.raw(), b.raw(), c.data(), m, k, n, false);
  return finish("matmul_nt", Tensor({m, n}, std::move(c)), {&a, &b},
                [a, b, m, k, n](std::span<const double> g, std::span<std::span<double>> gi) {
                  const auto& kern = kernels::active();
                  if (!gi[0].empty()) kern.gemm_nn(g.data(), b.raw(), gi[0].data(), m, n, k, true);
                  if (!gi[1].empty()) kern.gemm_tn(g.data(), a.raw(), gi[1].data(), n, m, k, true);
                });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = buffer(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return finish("add", Tensor(a.shape(), std::move(out)), {&a, &b},
                [](std::span<const double> g, std::span<std::span<double>> gi) {
                  for (auto& dst : gi) {
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
                  }
                });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  const auto n = x.dim(0), h = x.dim(1);
  if (bias.size() != h) throw ShapeError("add_bias: bias length must equal column count");
  auto out = buffer(x.size());
  auto xs = x.data(), bs = bias.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < h; ++j) out[i * h + j] = xs[i * h + j] + bs[j];
  return finish("add_bias", Tensor(x.shape(), std::move(out)), {&x, &bias},
                [n, h](std::span<const double> g, std::span<std::span<double>> gi) {
                  if (!gi[0].empty())
                    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                  if (!gi[1].empty())
                    for (std::int64_t i = 0; i < n; ++i)
                      for (std::int64_t j = 0; j < h; ++j) gi[1][j] += g[i * h + j];
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = buffer(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return finish("mul", Tensor(a.shape(), std::move(out)), {&a, &b},
                [a, b](std::span<const double> g, std::span<std::span<double>> gi) {
                  auto x = a.data(), y = b.data();
                  if (!gi[0].empty())
                    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * y[i];
                  if (!gi[1].empty())
                    for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * x[i];
                });
}

Tensor scale(const Tensor& a, double factor) {
  auto out = buffer(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return finish("scale", Tensor(a.shape(), std::move(out)), {&a},
                [factor](std::span<const double> g, std::span<std::span<double>> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * factor;
                });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return finish("sum", Tensor::scalar(s), {&a},
                [](std::span<const double> g, std::span<std::span<double>> gi) {
                  for (auto& v : gi[0]) v += g[0];
                });
}

Tensor tanh(const Tensor& a) {
  auto out = buffer(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  Tensor result(a.shape(), std::move(out));
  return finish("tanh", result, {&a},
                [result](std::span<const double> g, std::span<std::span<double>> gi) {
                  auto y = result.data();
                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * (1.0 - y[i] * y[i]);
                });
}

Tensor swiglu(const Tensor& gate, const Tensor& up) {
  require_same_shape(gate, up, "swiglu");
  auto out = buffer(gate.size());
  auto a = gate.data(), b = up.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double sig = 1.0 / (1.0 + std::exp(-a[i]));
    out[i] = a[i] * sig * b[i];
  }
  return finish("swiglu", Tensor(gate.shape(), std::move(out)), {&gate, &up},
                [gate, up](std::span<const double> g, std::span<std::span<double>> gi) {
                  auto a = gate.data(), b = up.data();
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const double sig = 1.0 / (1.0 + std::exp(-a[i]));
                    if (!gi[0].empty()) gi[0][i] += g[i] * b[i] * sig * (1.0 + a[i] * (1.0 - sig));
                    if (!gi[1].empty()) gi[1][i] += g[i] * a[i] * sig;
                  }
                });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  require_matrix(x, "rmsnorm");
  const auto n = x.dim(0), h = x.dim(1);
  if (gain.size() != h) throw ShapeError("rmsnorm: gain length must equal column count");
  auto out = buffer(x.size());
  std::vector<double> inv_rms(static_cast<std::size_t>(n));
  auto xs = x.data(), gs = gain.data();
  for (std::int64_t i = 0; i < n; ++i) {
    double ms = 0.0;
    for (std::int64_t j = 0; j < h; ++j) ms += xs[i * h + j] * xs[i * h + j];
    const double r = 1.0 / std::sqrt(ms / static_cast<double>(h) + eps);
    inv_rms[i] = r;
    for (std::int64_t j = 0; j < h; ++j) out[i * h + j] = xs[i * h + j] * r * gs[j];
  }
  return finish("rmsnorm", Tensor(x.shape(), std::move(out)), {&x, &gain},
                [x, gain, inv_rms = std::move(inv_rms), n, h](std::span<const double> g,
                                                               std::span<std::span<double>> gi) {
                  auto xs = x.data(), gs = gain.data();
                  for (std::int64_t i = 0; i < n; ++i) {
                    const double r = inv_rms[i];
                    const double* xi = xs.data() + i * h;
                    const double* gr = g.data() + i * h;
                    if (!gi[1].empty())
                      for (std::int64_t j = 0; j < h; ++j) gi[1][j] += gr[j] * xi[j] * r;
                    if (!gi[0].empty()) {
                      double dot = 0.0;
                      for (std::int64_t j = 0; j < h; ++j) dot += gr[j] * gs[j] * xi[j];
                      const double coef = r * r * r * dot / static_cast<double>(h);
                      double* dx = gi[0].data() + i * h;
                      for (std::int64_t j = 0; j < h; ++j) dx[j] += r * gr[j] * gs[j] - coef * xi[j];
                    }
                  }
                });
}

Tensor rope(const Tensor& x, std::int64_t seq_len, std::int64_t heads, std::int64_t head_dim,
            double base) {
  require_matrix(x, "rope");
  if (x.dim(1) != heads * head_dim || head_dim % 2 != 0 || x.dim(0) % seq_len != 0) {
    throw ShapeError("rope: layout mismatch for " + to_string(x.shape()));
  }
  const auto rows = x.dim(0), width = x.dim(1), half = head_dim / 2;
  std::vector<double> cos_t(static_cast<std::size_t>(seq_len * half));
  std::vector<double> sin_t(cos_t.size());
  for (std::int64_t p = 0; p < seq_len; ++p) {
    for (std::int64_t t = 0; t < half; ++t) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(t) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * freq;
      cos_t[p * half + t] = std::cos(angle);
      sin_t[p * half + t] = std::sin(angle);
    }
  }
  auto apply = [=](const double* src, double* dst, const std::vector<double>& c,
                   const std::vector<double>& s, double sign, bool accumulate) {
    for (std::int64_t i = 0; i < rows; ++i) {
      const std::int64_t p = i % seq_len;
      for (std::int64_t hh = 0; hh < heads; ++hh) {
        const double* xi = src + i * width + hh * head_dim;
        double* yi = dst + i * width + hh * head_dim;
        for (std::int64_t t = 0; t < half; ++t) {
          const double cs = c[p * half + t], sn = sign * s[p * half + t];
          const double y1 = xi[t] * cs - xi[t + half] * sn;
          const double y2 = xi[t] * sn + xi[t + half] * cs;
          if (accumulate) {
            yi[t] += y1;
            yi[t + half] += y2;
          } else {
            yi[t] = y1;
            yi[t + half] = y2;
          }
        }
      }
    }
  };
  auto out = buffer(x.size());
  apply(x.raw(), out.data(), cos_t, sin_t, 1.0, false);
  return finish("rope", Tensor(x.shape(), std::move(out)), {&x},
                [apply, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](
                    std::span<const double> g, std::span<std::span<double>> gi) {
                  // The transpose of a rotation is the rotation by -angle.
                  apply(g.data(), gi[0].data(), cos_t, sin_t, -1.0, true);
                });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::int64_t seq_len, std::int64_t q_heads, std::int64_t kv_heads,
                        std::int64_t head_dim) {
  require_matrix(q, "causal_attention");
  require_same_shape(k, v, "causal_attention");
  if (kv_heads <= 0 || q_heads % kv_heads != 0) {
    throw ShapeError("causal_attention: q heads must be a multiple of kv heads");
  }
  if (q.dim(1) != q_heads * head_dim || k.dim(1) != kv_heads * head_dim ||
      k.dim(0) != q.dim(0) || q.dim(0) % seq_len != 0) {
    throw ShapeError("causal_attention: layout mismatch");
  }
  const kernels::AttentionDims dims{q.dim(0) / seq_len, seq_len, q_heads, kv_heads, head_dim};
  auto out = buffer(q.size());
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(dims.batch * q_heads * seq_len * seq_len));
  kernels::active().attention_forward(dims, q.raw(), k.raw(), v.raw(), out.data(), probs->data());
  return finish("causal_attention", Tensor(q.shape(), std::move(out)), {&q, &k, &v},
                [q, k, v, dims, probs](std::span<const double> g, std::span<std::span<double>> gi) {
                  auto ptr = [](std::span<double> s) { return s.empty() ? nullptr : s.data(); };
                  kernels::active().attention_backward(dims, q.raw(), k.raw(), v.raw(),
                                                       probs->data(), g.data(), ptr(gi[0]),
                                                       ptr(gi[1]), ptr(gi[2]));
                });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.dim(0) != b.dim(0)) throw ShapeError("concat_cols: row counts differ");
  const auto n = a.dim(0), wa = a.dim(1), wb = b.dim(1), w = wa + wb;
  auto out = buffer(n * w);
  auto xa = a.data(), xb = b.data();
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(xa.data() + i * wa, wa, out.data() + i * w);
    std::copy_n(xb.data() + i * wb, wb, out.data() + i * w + wa);
  }
  return finish("concat_cols", Tensor({n, w}, std::move(out)), {&a, &b},
                [n, wa, wb, w](std::span<const double> g, std::span<std::span<double>> gi) {
                  for (std::int64_t i = 0; i < n; ++i) {
                    if (!gi[0].empty())
                      for (std::int64_t j = 0; j < wa; ++j) gi[0][i * wa + j] += g[i * w + j];
                    if (!gi[1].empty())
                      for (std::int64_t j = 0; j < wb; ++j) gi[1][i * wb + j] += g[i * w + wa + j];
                  }
                });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> tokens) {
  require_matrix(table, "embedding");
  const auto vocab = table.dim(0), h = table.dim(1);
  const auto n = static_cast<std::int64_t>(tokens.size());
  if (n == 0) throw InputError("embedding: empty token sequence");
  auto out = buffer(n * h);
  auto src = table.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto id = tokens[i];
    if (id < 0 || id >= vocab) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    std::copy_n(src.data() + id * h, h, out.data() + i * h);
  }
  std::vector<std::int32_t> ids(tokens.begin(), tokens.end());
  return finish("embedding", Tensor({n, h}, std::move(out)), {&table},
                [ids = std::move(ids), h](std::span<const double> g,
                                          std::span<std::span<double>> gi) {
                  for (std::size_t i = 0; i < ids.size(); ++i)
                    for (std::int64_t j = 0; j < h; ++j) gi[0][ids[i] * h + j] += g[i * h + j];
                });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::optional<std::span<const double>> weights) {
  require_matrix(logits, "cross_entropy");
  const auto n = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n) {
    throw ShapeError("cross_entropy: one target per row required");
  }
  if (weights && static_cast<std::int64_t>(weights->size()) != n) {
    throw ShapeError("cross_entropy: one weight per row required");
  }
  std::vector<double> w(static_cast<std::size_t>(n), 1.0);
  if (weights) std::copy(weights->begin(), weights->end(), w.begin());
  double total_w = 0.0;
  for (double x : w) total_w += x;
  if (!(total_w > 0.0)) throw ContractError("cross_entropy: weights sum to zero");

  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * vocab));
  auto xs = logits.data();
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto t = targets[i];
    if (t < 0 || t >= vocab) throw InputError("cross_entropy: target outside vocabulary");
    const double* row = xs.data() + i * vocab;
    double* p = probs->data() + i * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::int64_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(row[j] - mx);
      z += p[j];
    }
    for (std::int64_t j = 0; j < vocab; ++j) p[j] /= z;
    loss += w[i] * (std::log(z) + mx - row[t]);
  }
  loss /= total_w;
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return finish("cross_entropy", Tensor::scalar(loss), {&logits},
                [probs, tg = std::move(tg), w = std::move(w), total_w, vocab](
                    std::span<const double> g, std::span<std::span<double>> gi) {
                  for (std::size_t i = 0; i < tg.size(); ++i) {
                    const double c = g[0] * w[i] / total_w;
                    if (c == 0.0) continue;
                    const double* p = probs->data() + i * vocab;
                    double* d = gi[0].data() + i * vocab;
                    for (std::int64_t j = 0; j < vocab; ++j) d[j] += c * p[j];
                    d[tg[i]] -= c;
                  }
                });
}

}  // namespace retrofit
