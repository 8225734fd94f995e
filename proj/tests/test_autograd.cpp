// SPDX-License-Identifier: Apache-2.0
//
// Every op's backward rule against central differences, plus tape contracts.

#include <doctest.h>

#include <cmath>

#include "retrofit/errors.hpp"
#include "support.hpp"

using namespace retrofit;
using namespace retrofit::testing;

namespace {

// Contracts an op output with fixed random weights so every output element
// contributes a distinct amount to the scalar.
Tensor contract(const Tensor& out, std::uint64_t seed = 99) {
  return sum(mul(out, random_tensor(out.shape(), seed)));
}

}  // namespace

TEST_CASE("matmul and matmul_nt gradients") {
  const auto a = random_tensor({3, 4}, 1), b = random_tensor({4, 5}, 2), c = random_tensor({5, 4}, 3);
  CHECK(check_inputs({a, b}, [](const std::vector<Tensor>& x) { return contract(matmul(x[0], x[1])); })
            .max_rel_error < 1e-6);
  CHECK(check_inputs({a, c}, [](const std::vector<Tensor>& x) { return contract(matmul_nt(x[0], x[1])); })
            .max_rel_error < 1e-6);
}

TEST_CASE("elementwise op gradients") {
  const auto a = random_tensor({3, 4}, 4), b = random_tensor({3, 4}, 5), bias = random_tensor({4}, 6);
  CHECK(check_inputs({a, b}, [](const auto& x) { return contract(add(x[0], x[1])); }).max_rel_error < 1e-6);
  CHECK(check_inputs({a, b}, [](const auto& x) { return contract(mul(x[0], x[1])); }).max_rel_error < 1e-6);
  CHECK(check_inputs({a, bias}, [](const auto& x) { return contract(add_bias(x[0], x[1])); }).max_rel_error < 1e-6);
  CHECK(check_inputs({a}, [](const auto& x) { return contract(scale(x[0], -2.5)); }).max_rel_error < 1e-6);
  CHECK(check_inputs({a}, [](const auto& x) { return contract(tanh(x[0])); }).max_rel_error < 1e-6);
  CHECK(check_inputs({a, b}, [](const auto& x) { return contract(swiglu(x[0], x[1])); }).max_rel_error < 1e-6);
  CHECK(check_inputs({a, b}, [](const auto& x) { return contract(concat_cols(x[0], x[1])); }).max_rel_error < 1e-6);
}

TEST_CASE("rmsnorm gradient covers input and gain") {
  const auto x = random_tensor({5, 6}, 7), g = random_tensor({6}, 8);
  CHECK(check_inputs({x, g}, [](const auto& v) { return contract(rmsnorm(v[0], v[1], 1e-5)); }).max_rel_error <
        1e-6);
}

TEST_CASE("rope is a rotation and its gradient matches") {
  const auto x = random_tensor({6, 8}, 9);  // 2 sequences of 3, 2 heads of 4
  const Tensor y = rope(x, 3, 2, 4, 10000.0);
  // Norm of every (i, i + half) pair is preserved.
  for (std::int64_t r = 0; r < 6; ++r) {
    for (std::int64_t h = 0; h < 2; ++h) {
      for (std::int64_t i = 0; i < 2; ++i) {
        const auto c0 = h * 4 + i, c1 = c0 + 2;
        CHECK(std::hypot(x.at(r, c0), x.at(r, c1)) == doctest::Approx(std::hypot(y.at(r, c0), y.at(r, c1))));
      }
    }
  }
  // Position 0 is unrotated.
  for (std::int64_t c = 0; c < 8; ++c) CHECK(y.at(3, c) == x.at(3, c));
  CHECK(check_inputs({x}, [](const auto& v) { return contract(rope(v[0], 3, 2, 4, 10000.0)); }).max_rel_error <
        1e-6);
}

TEST_CASE("rope position angle uses base^(-2i/d)") {
  // Single head of width 2: rotation by theta = pos.
  const Tensor x({2, 2}, {1.0, 0.0, 1.0, 0.0});
  const Tensor y = rope(x, 2, 1, 2, 10000.0);
  CHECK(y.at(1, 0) == doctest::Approx(std::cos(1.0)));
  CHECK(y.at(1, 1) == doctest::Approx(std::sin(1.0)));
}

TEST_CASE("causal attention gradient with grouped heads") {
  // 2 sequences of 3 tokens, 4 query heads over 2 kv heads, head_dim 2.
  const auto q = random_tensor({6, 8}, 10), k = random_tensor({6, 4}, 11), v = random_tensor({6, 4}, 12);
  CHECK(check_inputs({q, k, v},
                     [](const auto& x) { return contract(causal_attention(x[0], x[1], x[2], 3, 4, 2, 2)); })
            .max_rel_error < 1e-6);
}

TEST_CASE("causal attention ignores future tokens") {
  const auto q = random_tensor({4, 4}, 13), k = random_tensor({4, 4}, 14), v = random_tensor({4, 4}, 15);
  const Tensor base = causal_attention(q, k, v, 4, 2, 2, 2);
  const Tensor k2 = with_value(k, 3 * 4 + 1, 50.0);
  const Tensor v2 = with_value(v, 3 * 4 + 0, -50.0);
  const Tensor moved = causal_attention(q, k2, v2, 4, 2, 2, 2);
  for (std::int64_t r = 0; r < 3; ++r)
    for (std::int64_t c = 0; c < 4; ++c) CHECK(base.at(r, c) == moved.at(r, c));
  // First token attends only to itself.
  for (std::int64_t c = 0; c < 4; ++c) CHECK(base.at(0, c) == doctest::Approx(v.at(0, c)));
}

TEST_CASE("embedding gradient accumulates repeated ids") {
  const auto table = random_tensor({5, 3}, 16);
  const std::vector<std::int32_t> ids{1, 4, 1, 0};
  CHECK(check_inputs({table}, [&](const auto& x) { return contract(embedding(x[0], ids)); }).max_rel_error < 1e-6);
  CHECK_THROWS_AS(embedding(table, std::vector<std::int32_t>{5}), InputError);
  CHECK_THROWS_AS(embedding(table, std::vector<std::int32_t>{-1}), InputError);
}

TEST_CASE("cross entropy value, weights and gradient") {
  SUBCASE("uniform logits give ln(vocab)") {
    const Tensor logits = Tensor::zeros({3, 7});
    CHECK(cross_entropy(logits, std::vector<std::int32_t>{0, 3, 6}).item() == doctest::Approx(std::log(7.0)));
  }
  SUBCASE("weighted mean") {
    const Tensor logits = random_tensor({3, 4}, 17);
    const std::vector<std::int32_t> t{0, 1, 2};
    const std::vector<double> w{1.0, 0.0, 3.0};
    double ce[3];
    for (int r = 0; r < 3; ++r) {
      const Tensor row({1, 4}, {logits.at(r, 0), logits.at(r, 1), logits.at(r, 2), logits.at(r, 3)});
      ce[r] = cross_entropy(row, std::vector<std::int32_t>{t[r]}).item();
    }
    const double expected = (ce[0] + 3 * ce[2]) / 4;
    CHECK(cross_entropy(logits, t, std::span<const double>(w)).item() == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("gradient") {
    const Tensor logits = random_tensor({4, 5}, 18);
    const std::vector<std::int32_t> t{4, 0, 2, 2};
    CHECK(check_inputs({logits}, [&](const auto& x) { return cross_entropy(x[0], t); }).max_rel_error < 1e-6);
  }
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST_CASE("tape contracts") {
  SUBCASE("non-scalar loss") {
    Tape tape;
    const Tensor x = tape.watch(Tensor::zeros({2}));
    CHECK_THROWS_AS(backward(x, tape), ContractError);
  }
  SUBCASE("loss from another tape") {
    Tape a, b;
    Tensor loss;
    {
      TapeScope scope(a);
      loss = sum(a.watch(Tensor::full({2}, 1.0)));
    }
    CHECK_THROWS_AS(backward(loss, b), ContractError);
  }
  SUBCASE("mixing tapes in one op") {
    Tape a, b;
    const Tensor x = a.watch(Tensor::full({2}, 1.0));
    const Tensor y = b.watch(Tensor::full({2}, 1.0));
    TapeScope scope(a);
    CHECK_THROWS_AS(add(x, y), ContractError);
  }
  SUBCASE("no recording without an active tape") {
    Tape tape;
    const Tensor x = tape.watch(Tensor::full({2}, 1.0));
    const auto before = tape.size();
    { NoGradScope none; (void)sum(mul(x, x)); }
    CHECK(tape.size() == before);
  }
  SUBCASE("detached values carry no gradient") {
    Tape tape;
    const Tensor x = tape.watch(Tensor::full({2}, 3.0));
    Gradients g;
    {
      TapeScope scope(tape);
      g = backward(sum(mul(x, detach(x))), tape);
    }
    CHECK(g.of(x)->data()[0] == doctest::Approx(3.0));
  }
  SUBCASE("unused leaves report no gradient") {
    Tape tape;
    const Tensor x = tape.watch(Tensor::full({2}, 3.0));
    const Tensor y = tape.watch(Tensor::full({2}, 3.0));
    Gradients g;
    {
      TapeScope scope(tape);
      g = backward(sum(x), tape);
    }
    CHECK_FALSE(g.of(y).has_value());
    CHECK(g.of_or_zero(y).data()[1] == 0.0);
  }
}

TEST_CASE("finite checks raise on overflow") {
  set_finite_checks(true);
  const Tensor big = Tensor::full({1}, 1e308);
  CHECK_THROWS_AS(scale(big, 10.0), NonFiniteError);
  set_finite_checks(false);
  CHECK_FALSE(all_finite(scale(big, 10.0)));
}

TEST_CASE("random streams are counter based") {
  RandomStream a(5, "x"), b(5, "x"), c(5, "y");
  const auto a0 = a.next_u64();
  CHECK(a0 == b.next_u64());
  CHECK(a0 != c.next_u64());
  CHECK(a.fork("f", 1).next_u64() == b.fork("f", 1).next_u64());
  CHECK(a.fork("f", 1).next_u64() != a.fork("f", 2).next_u64());
  RandomStream u(1, "u");
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK((x > 0.0 && x < 1.0));
  }
  CHECK_THROWS_AS(draw_normal(u, {2}, 0.0, -1.0), ContractError);
}

TEST_CASE("poisson sampler moments") {
  for (const double lambda : {0.5, 3.0, 25.0, 400.0}) {
    RandomStream s(3, "poisson");
    double m = 0, m2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const double k = static_cast<double>(s.poisson(lambda));
      m += k;
      m2 += k * k;
    }
    m /= n;
    const double var = m2 / n - m * m;
    CHECK(std::abs(m - lambda) < 4 * std::sqrt(lambda / n));
    CHECK(var == doctest::Approx(lambda).epsilon(0.06));
  }
}
