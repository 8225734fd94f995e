// SPDX-License-Identifier: Apache-2.0
//
// Serial reference vs OpenMP kernels. Run with OMP_NUM_THREADS=N to compare.

#include <benchmark/benchmark.h>

#include <vector>

#include "retrofit/kernels.hpp"
#include "retrofit/random.hpp"

namespace {

using retrofit::kernels::KernelSet;

std::vector<double> noise(std::size_t n, const char* label) {
  retrofit::RandomStream s(42, label);
  std::vector<double> v(n);
  for (auto& x : v) x = s.normal();
  return v;
}

void gemm(benchmark::State& state, const KernelSet& ks) {
  const auto n = state.range(0);
  const auto a = noise(n * n, "a");
  const auto b = noise(n * n, "b");
  std::vector<double> c(n * n);
  for (auto _ : state) {
    ks.gemm_nn(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

void attention(benchmark::State& state, const KernelSet& ks) {
  const retrofit::kernels::AttentionDims d{4, state.range(0), 8, 4, 32};
  const auto rows = d.batch * d.seq_len;
  const auto q = noise(rows * d.q_heads * d.head_dim, "q");
  const auto k = noise(rows * d.kv_heads * d.head_dim, "k");
  const auto v = noise(rows * d.kv_heads * d.head_dim, "v");
  std::vector<double> out(q.size()), probs(d.batch * d.q_heads * d.seq_len * d.seq_len);
  for (auto _ : state) {
    ks.attention_forward(d, q.data(), k.data(), v.data(), out.data(), probs.data());
    benchmark::DoNotOptimize(out.data());
  }
}

void gemm_serial(benchmark::State& s) { gemm(s, retrofit::kernels::serial_kernels()); }
void gemm_parallel(benchmark::State& s) { gemm(s, retrofit::kernels::parallel_kernels()); }
void attention_serial(benchmark::State& s) { attention(s, retrofit::kernels::serial_kernels()); }
void attention_parallel(benchmark::State& s) { attention(s, retrofit::kernels::parallel_kernels()); }

}  // namespace

BENCHMARK(gemm_serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(gemm_parallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(attention_serial)->Arg(64)->Arg(256);
BENCHMARK(attention_parallel)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
