// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenization, corpus packing, synthetic corpora and the
// phase-mixed batch source used by training and evaluation.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "retrofit/random.hpp"

namespace retrofit {

inline constexpr std::int32_t kSeparatorToken = 256;
inline constexpr std::int64_t kByteVocab = 257;

struct Document {
  std::string text;
  // Half-open byte ranges holding task answers (scored for accuracy).
  std::vector<std::pair<std::size_t, std::size_t>> answers;
};

struct Context {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  // 1 where targets[i] is an answer token.
  std::vector<double> answer_mask;
};

std::vector<std::int32_t> tokenize(std::string_view text);

// Documents are concatenated, each followed by a separator token when
// `append_separator` is set, and cut into contexts of `context_length`
// inputs whose targets are the same tokens shifted by one. A trailing
// remainder shorter than context_length + 1 tokens is dropped.
std::vector<Context> pack_corpus(const std::vector<Document>& docs, std::int64_t context_length,
                                 bool append_separator = true);
std::vector<Context> pack_corpus(const std::vector<std::string>& docs,
                                 std::int64_t context_length, bool append_separator = true);

// Synthetic corpora:
//   "text"  pseudo-English sentences from a small grammar (low-shift healing data)
//   "arith" "a+b=c" two-digit additions; the sum is the answer
//   "copy"  "abcd|abcd"; the copied half is the answer
//   "chain" "a=3,b=a+4,c=b+1;c=8" single-digit mod-10 chains; the final value is the answer
std::vector<std::string> dataset_names();
bool is_dataset(const std::string& name);
Document generate_document(const std::string& dataset, RandomStream& stream);

struct TokenBatch {
  std::int64_t batch = 0;
  std::int64_t seq_len = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  std::vector<double> answer_mask;
};

struct Phase {
  std::vector<double> weights;  // one per PhaseSpec::datasets entry
  std::int64_t begin = 0;       // [begin, end)
  std::int64_t end = 0;
};

struct PhaseSpec {
  std::vector<std::string> datasets;
  std::vector<Phase> phases;
  // Throws ConfigError unless phases partition [0, total_steps) with
  // non-negative weights summing to 1.
  void validate(std::int64_t total_steps) const;
};

// Weights of the phase whose range contains `step`.
const std::vector<double>& phase_mixture(const PhaseSpec& phases, std::int64_t step);

// Sequence i of training step s is a pure function of (seed, s, i).
class BatchSource {
 public:
  BatchSource(PhaseSpec phases, std::int64_t context_length, std::uint64_t seed);

  // Sequences [first, first + count) of `step`.
  TokenBatch batch(std::int64_t step, std::int64_t first, std::int64_t count) const;
  Context sequence(std::int64_t step, std::int64_t index) const;

 private:
  PhaseSpec phases_;
  std::int64_t context_length_;
  std::uint64_t seed_;
};

// Fixed held-out set drawn from a single dataset.
TokenBatch make_eval_set(const std::string& dataset, std::int64_t sequences,
                         std::int64_t context_length, std::uint64_t seed);

// Rows [first, first + count) of a batch.
TokenBatch slice_batch(const TokenBatch& b, std::int64_t first, std::int64_t count);

}  // namespace retrofit
