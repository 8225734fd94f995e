// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <limits>

#include "retrofit/checkpoint.hpp"
#include "retrofit/errors.hpp"
#include "retrofit/optim.hpp"
#include "support.hpp"

using namespace retrofit;
using namespace retrofit::testing;

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    for (std::int64_t j = 0; j < t.dim(1); ++j) m(i, j) = t.at(i, j);
  return m;
}

// Random matrix with singular values spread over [lo, hi] (condition hi/lo).
Tensor conditioned(std::int64_t rows, std::int64_t cols, double lo, double hi, std::uint64_t seed) {
  const auto k = std::min(rows, cols);
  const Eigen::MatrixXd a = to_eigen(random_tensor({rows, k}, seed));
  const Eigen::MatrixXd b = to_eigen(random_tensor({cols, k}, seed + 1));
  const Eigen::MatrixXd u = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ() * Eigen::MatrixXd::Identity(rows, k);
  const Eigen::MatrixXd v = Eigen::HouseholderQR<Eigen::MatrixXd>(b).householderQ() * Eigen::MatrixXd::Identity(cols, k);
  Eigen::VectorXd s(k);
  for (std::int64_t i = 0; i < k; ++i) s(i) = lo * std::pow(hi / lo, static_cast<double>(i) / std::max<std::int64_t>(k - 1, 1));
  const Eigen::MatrixXd m = u * s.asDiagonal() * v.transpose();
  std::vector<double> d(static_cast<std::size_t>(rows * cols));
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) d[i * cols + j] = m(i, j);
  return Tensor({rows, cols}, std::move(d));
}

struct Toy {
  Tensor w = random_tensor({4, 3}, 1);
  Tensor b = random_tensor({3}, 2);
  std::vector<ParamSlot> slots() {
    return {ParamSlot{"w", &w, ParamRole::matrix}, ParamSlot{"b", &b, ParamRole::vector}};
  }
};

}  // namespace

TEST_CASE("newton-schulz maps zero to zero") {
  const Tensor z = newton_schulz5(Tensor::zeros({8, 8}));
  for (const double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("newton-schulz singular values land near one") {
  for (const auto& [r, c] : std::vector<std::pair<std::int64_t, std::int64_t>>{{8, 8}, {16, 64}, {64, 16}}) {
    CAPTURE(r);
    CAPTURE(c);
    const Tensor g = conditioned(r, c, 0.1, 3.0, static_cast<std::uint64_t>(r * 100 + c));
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(newton_schulz5(g)));
    const auto& sv = svd.singularValues();
    CHECK(sv.minCoeff() >= 0.3);
    CHECK(sv.maxCoeff() <= 1.3);
    // Singular vectors follow the input: the output's row space aligns with g's.
    const Eigen::JacobiSVD<Eigen::MatrixXd> in(to_eigen(g), Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::MatrixXd polar = in.matrixU() * in.matrixV().transpose();
    CHECK((to_eigen(newton_schulz5(g)) - polar).norm() / polar.norm() < 0.4);
  }
}

TEST_CASE("newton-schulz is scale invariant and handles tall inputs by transposition") {
  const Tensor g = conditioned(12, 5, 0.2, 2.0, 7);
  const Tensor g10 = scale(g, 10.0);
  CHECK(max_abs_diff(newton_schulz5(g), newton_schulz5(g10)) < 1e-6);
  std::vector<double> t(60);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 5; ++j) t[j * 12 + i] = g.at(i, j);
  const Tensor gt({5, 12}, std::move(t));
  const Tensor a = newton_schulz5(g), b = newton_schulz5(gt);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 5; ++j) CHECK(a.at(i, j) == doctest::Approx(b.at(j, i)).epsilon(1e-12));
}

TEST_CASE("adamw first step matches the closed form") {
  Toy toy;
  const Tensor w0 = toy.w;
  const std::vector<Tensor> grads{random_tensor({4, 3}, 3), random_tensor({3}, 4)};
  AdamWState st;
  const double lr = 0.01;
  REQUIRE(adamw_step(st, toy.slots(), grads, lr));
  // Bias-corrected first step: update = g / (|g| + eps).
  for (std::size_t i = 0; i < 12; ++i) {
    const double g = grads[0].data()[i];
    const double expected = w0.data()[i] * (1 - lr * 1e-4) - lr * g / (std::abs(g) + 1e-8);
    CHECK(toy.w.data()[i] == doctest::Approx(expected).epsilon(1e-12));
  }
  CHECK(st.step == 1);
}

TEST_CASE("adamw-star clips the update rms and decays independently of lr") {
  Toy toy;
  const Tensor w0 = toy.w;
  // first step: |update| = 1 per element so rms = 1 and no clipping at c = 1
  const std::vector<Tensor> grads{random_tensor({4, 3}, 5), Tensor::zeros({3})};
  AdamWState st;
  st.config.weight_decay = 0.1;
  AdamWStarSpec spec;
  spec.update_clip = 0.5;
  REQUIRE(adamw_star_step(st, spec, toy.slots(), grads, 0.01));
  for (std::size_t i = 0; i < 12; ++i) {
    const double g = grads[0].data()[i];
    const double expected = w0.data()[i] * 0.9 - 0.01 * 0.5 * (g > 0 ? 1.0 : -1.0);
    CHECK(toy.w.data()[i] == doctest::Approx(expected).epsilon(1e-12));
  }
  // Zero gradient without eps: no update, only decay.
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::isfinite(toy.b.data()[i]));
}

TEST_CASE("non-finite gradients skip the step") {
  Toy toy;
  const Tensor w0 = toy.w;
  std::vector<Tensor> grads{random_tensor({4, 3}, 6), random_tensor({3}, 7)};
  grads[1] = with_value(grads[1], 0, std::numeric_limits<double>::quiet_NaN());
  AdamWState st;
  CHECK_FALSE(adamw_step(st, toy.slots(), grads, 0.01));
  CHECK(bitwise_equal(toy.w, w0));
  CHECK(st.step == 0);
  MuonState ms = make_muon_state(MuonConfig{});
  CHECK_FALSE(muon_step(ms, toy.slots(), grads, 0.01));
  CHECK(bitwise_equal(toy.w, w0));
  CHECK_THROWS_AS(clip_global_norm(grads), NonFiniteError);
}

TEST_CASE("muon routes matrices to newton-schulz and the rest to adamw") {
  const std::vector<Tensor> grads{random_tensor({4, 3}, 8), random_tensor({3}, 9)};
  Toy a, b;
  MuonConfig mc;
  mc.weight_decay = 0.0;
  mc.fallback.weight_decay = 0.0;
  mc.fallback_lr_scale = 0.5;
  MuonState ms = make_muon_state(mc);
  REQUIRE(muon_step(ms, a.slots(), grads, 0.02));
  // Vector parameter: identical to a plain AdamW step at the scaled lr.
  AdamWState st;
  st.config = mc.fallback;
  auto slots = b.slots();
  REQUIRE(adamw_step(st, std::span<const ParamSlot>(slots).subspan(1), std::span<const Tensor>(grads).subspan(1), 0.01));
  CHECK(bitwise_equal(a.b, b.b));
  // Matrix: w - lr * sqrt(4/3) * NS(g + 0.95 g), first step.
  const Tensor ortho = newton_schulz5(scale(grads[0], 1.95));
  const double aspect = std::sqrt(4.0 / 3.0);
  for (std::size_t i = 0; i < 12; ++i)
    CHECK(a.w.data()[i] == doctest::Approx(b.w.data()[i] - 0.02 * aspect * ortho.data()[i]).epsilon(1e-12));
  // Embedding-role matrices also take the fallback.
  Tensor e = random_tensor({4, 3}, 10), e2 = e;
  std::vector<ParamSlot> emb{ParamSlot{"embedding", &e, ParamRole::embedding}};
  std::vector<ParamSlot> emb2{ParamSlot{"embedding", &e2, ParamRole::embedding}};
  MuonState ms2 = make_muon_state(mc);
  AdamWState st2;
  st2.config = mc.fallback;
  REQUIRE(muon_step(ms2, emb, std::span<const Tensor>(grads).first(1), 0.02));
  REQUIRE(adamw_step(st2, emb2, std::span<const Tensor>(grads).first(1), 0.01));
  CHECK(bitwise_equal(e, e2));
}

TEST_CASE("global norm clipping") {
  std::vector<Tensor> g{Tensor({2}, {3.0, 0.0}), Tensor({1}, {4.0})};
  const auto r = clip_global_norm(g, 1.0);
  CHECK(r.norm == doctest::Approx(5.0));
  CHECK(r.clipped);
  CHECK(g[0].data()[0] == doctest::Approx(0.6));
  CHECK(g[1].data()[0] == doctest::Approx(0.8));
  std::vector<Tensor> small{Tensor({1}, {0.5})};
  CHECK_FALSE(clip_global_norm(small, 1.0).clipped);
}

TEST_CASE("optimizer state survives a checkpoint round trip") {
  for (const auto kind : {OptimizerKind::adamw, OptimizerKind::adamw_star, OptimizerKind::muon}) {
    CAPTURE(to_string(kind));
    OptimizerConfig oc;
    oc.kind = kind;
    Toy a;
    Optimizer opt(oc);
    const std::vector<Tensor> g1{random_tensor({4, 3}, 11), random_tensor({3}, 12)};
    const std::vector<Tensor> g2{random_tensor({4, 3}, 13), random_tensor({3}, 14)};
    REQUIRE(opt.step(a.slots(), g1, 0.01));
    Toy b = a;
    Checkpoint ck;
    opt.save(ck);
    Optimizer restored(oc);
    restored.load(Checkpoint::deserialize(ck.serialize()));
    REQUIRE(opt.step(a.slots(), g2, 0.01));
    REQUIRE(restored.step(b.slots(), g2, 0.01));
    CHECK(bitwise_equal(a.w, b.w));
    CHECK(bitwise_equal(a.b, b.b));
    CHECK(parse_optimizer_kind(to_string(kind)) == kind);
  }
  CHECK_THROWS_AS(parse_optimizer_kind("sgd"), ConfigError);
}
