// SPDX-License-Identifier: Apache-2.0

#include "retrofit/data.hpp"

#include <array>
#include <cmath>

#include "retrofit/errors.hpp"

namespace retrofit {
namespace {

std::size_t pick(RandomStream& s, std::size_t n) {
  return static_cast<std::size_t>(s.next_u64() % n);
}

int digit(RandomStream& s) { return static_cast<int>(s.next_u64() % 10); }

constexpr std::array kDeterminers{"the", "a", "every", "some", "this"};
constexpr std::array kAdjectives{"small", "quiet", "red", "old", "bright", "cold", "happy", "tall"};
constexpr std::array kNouns{"cat",  "river", "house", "teacher", "bird", "garden",
                            "road", "child", "stone", "window",  "tree", "boat"};
constexpr std::array kVerbs{"sees", "finds", "follows", "likes", "paints", "hears", "builds", "keeps"};
constexpr std::array kPrepositions{"near", "under", "behind", "beside", "over"};

template <std::size_t N>
const char* choose(RandomStream& s, const std::array<const char*, N>& words) {
  return words[pick(s, N)];
}

void noun_phrase(RandomStream& s, std::string& out) {
  out += choose(s, kDeterminers);
  out += ' ';
  if (s.uniform() < 0.5) {
    out += choose(s, kAdjectives);
    out += ' ';
  }
  out += choose(s, kNouns);
}

Document text_document(RandomStream& s) {
  Document doc;
  const auto sentences = 2 + pick(s, 4);
  for (std::size_t i = 0; i < sentences; ++i) {
    if (i) doc.text += ' ';
    std::string sentence;
    noun_phrase(s, sentence);
    sentence += ' ';
    sentence += choose(s, kVerbs);
    sentence += ' ';
    noun_phrase(s, sentence);
    if (s.uniform() < 0.4) {
      sentence += ' ';
      sentence += choose(s, kPrepositions);
      sentence += ' ';
      noun_phrase(s, sentence);
    }
    sentence += '.';
    doc.text += sentence;
  }
  return doc;
}

void add_answer(Document& doc, const std::string& answer) {
  const auto begin = doc.text.size();
  doc.text += answer;
  doc.answers.emplace_back(begin, doc.text.size());
}

Document arith_document(RandomStream& s) {
  const int a = static_cast<int>(s.next_u64() % 100);
  const int b = static_cast<int>(s.next_u64() % 100);
  Document doc;
  doc.text = std::to_string(a) + "+" + std::to_string(b) + "=";
  add_answer(doc, std::to_string(a + b));
  return doc;
}

Document copy_document(RandomStream& s) {
  const auto len = 3 + pick(s, 6);
  std::string word;
  for (std::size_t i = 0; i < len; ++i) word += static_cast<char>('a' + pick(s, 26));
  Document doc;
  doc.text = word + "|";
  add_answer(doc, word);
  return doc;
}

Document chain_document(RandomStream& s) {
  const auto links = 2 + pick(s, 3);
  Document doc;
  char name = static_cast<char>('a' + pick(s, 20));
  int value = digit(s);
  doc.text = std::string(1, name) + "=" + std::to_string(value);
  for (std::size_t i = 0; i < links; ++i) {
    const int inc = digit(s);
    const char next = static_cast<char>(name + 1);
    doc.text += ";" + std::string(1, next) + "=" + std::string(1, name) + "+" + std::to_string(inc);
    value = (value + inc) % 10;
    name = next;
  }
  doc.text += ";" + std::string(1, name) + "=";
  add_answer(doc, std::to_string(value));
  return doc;
}

}  // namespace

std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<std::int32_t>(c));
  return out;
}

std::vector<Context> pack_corpus(const std::vector<Document>& docs, std::int64_t context_length,
                                 bool append_separator) {
  if (context_length < 1) throw ContractError("pack_corpus: context length must be >= 1");
  std::vector<std::int32_t> tokens;
  std::vector<double> answer;
  for (const auto& doc : docs) {
    const auto base = tokens.size();
    for (unsigned char c : doc.text) tokens.push_back(c);
    answer.resize(tokens.size(), 0.0);
    for (const auto& [b, e] : doc.answers) {
      for (auto i = b; i < e && i < doc.text.size(); ++i) answer[base + i] = 1.0;
    }
    if (append_separator) {
      tokens.push_back(kSeparatorToken);
      answer.push_back(0.0);
    }
  }
  if (tokens.empty()) throw InputError("pack_corpus: corpus is empty");
  std::vector<Context> out;
  const auto n = static_cast<std::size_t>(context_length);
  for (std::size_t start = 0; start + n + 1 <= tokens.size(); start += n) {
    Context c;
    c.inputs.assign(tokens.begin() + start, tokens.begin() + start + n);
    c.targets.assign(tokens.begin() + start + 1, tokens.begin() + start + n + 1);
    c.answer_mask.assign(answer.begin() + start + 1, answer.begin() + start + n + 1);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<Context> pack_corpus(const std::vector<std::string>& docs,
                                 std::int64_t context_length, bool append_separator) {
  std::vector<Document> d;
  d.reserve(docs.size());
  for (const auto& text : docs) d.push_back(Document{text, {}});
  return pack_corpus(d, context_length, append_separator);
}

std::vector<std::string> dataset_names() { return {"text", "arith", "copy", "chain"}; }

bool is_dataset(const std::string& name) {
  for (const auto& n : dataset_names())
    if (n == name) return true;
  return false;
}

Document generate_document(const std::string& dataset, RandomStream& stream) {
  if (dataset == "text") return text_document(stream);
  if (dataset == "arith") return arith_document(stream);
  if (dataset == "copy") return copy_document(stream);
  if (dataset == "chain") return chain_document(stream);
  throw InputError("unknown dataset '" + dataset + "'");
}

void PhaseSpec::validate(std::int64_t total_steps) const {
  if (datasets.empty()) throw ConfigError("phases: no datasets listed");
  for (const auto& d : datasets) {
    if (!is_dataset(d)) throw ConfigError("phases: unknown dataset '" + d + "'");
  }
  if (phases.empty()) throw ConfigError("phases: at least one phase is required");
  std::int64_t expected = 0;
  for (const auto& p : phases) {
    if (p.weights.size() != datasets.size()) {
      throw ConfigError("phases: each phase needs one weight per dataset");
    }
    double total = 0.0;
    for (double w : p.weights) {
      if (!(w >= 0.0)) throw ConfigError("phases: weights must be non-negative");
      total += w;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("phases: weights must sum to 1");
    if (p.begin != expected || p.end <= p.begin) {
      throw ConfigError("phases: step ranges must be contiguous, non-empty and start at 0");
    }
    expected = p.end;
  }
  if (expected < total_steps) {
    throw ConfigError("phases: ranges end at " + std::to_string(expected) +
                      " but the run has " + std::to_string(total_steps) + " steps");
  }
}

const std::vector<double>& phase_mixture(const PhaseSpec& phases, std::int64_t step) {
  for (const auto& p : phases.phases) {
    if (step >= p.begin && step < p.end) return p.weights;
  }
  throw ContractError("phase_mixture: step " + std::to_string(step) + " is outside every phase");
}

BatchSource::BatchSource(PhaseSpec phases, std::int64_t context_length, std::uint64_t seed)
    : phases_(std::move(phases)), context_length_(context_length), seed_(seed) {}

namespace {

Context draw_context(const std::string& dataset, std::int64_t context_length, RandomStream& s) {
  std::vector<Document> docs;
  std::size_t tokens = 0;
  while (tokens < static_cast<std::size_t>(context_length) + 1) {
    docs.push_back(generate_document(dataset, s));
    tokens += docs.back().text.size() + 1;
  }
  return pack_corpus(docs, context_length).front();
}

void append(TokenBatch& b, const Context& c) {
  b.inputs.insert(b.inputs.end(), c.inputs.begin(), c.inputs.end());
  b.targets.insert(b.targets.end(), c.targets.begin(), c.targets.end());
  b.answer_mask.insert(b.answer_mask.end(), c.answer_mask.begin(), c.answer_mask.end());
  ++b.batch;
}

}  // namespace

Context BatchSource::sequence(std::int64_t step, std::int64_t index) const {
  RandomStream s = RandomStream(seed_, "data")
                       .fork("step", static_cast<std::uint64_t>(step))
                       .fork("seq", static_cast<std::uint64_t>(index));
  const auto& weights = phase_mixture(phases_, step);
  const double u = s.uniform();
  double acc = 0.0;
  std::size_t chosen = weights.size() - 1;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc && weights[i] > 0.0) {
      chosen = i;
      break;
    }
  }
  while (weights[chosen] == 0.0 && chosen > 0) --chosen;
  return draw_context(phases_.datasets[chosen], context_length_, s);
}

TokenBatch BatchSource::batch(std::int64_t step, std::int64_t first, std::int64_t count) const {
  TokenBatch b;
  b.seq_len = context_length_;
  for (std::int64_t i = 0; i < count; ++i) append(b, sequence(step, first + i));
  return b;
}

TokenBatch make_eval_set(const std::string& dataset, std::int64_t sequences,
                         std::int64_t context_length, std::uint64_t seed) {
  TokenBatch b;
  b.seq_len = context_length;
  for (std::int64_t i = 0; i < sequences; ++i) {
    RandomStream s = RandomStream(seed, "eval/" + dataset).fork("seq", static_cast<std::uint64_t>(i));
    append(b, draw_context(dataset, context_length, s));
  }
  return b;
}

TokenBatch slice_batch(const TokenBatch& b, std::int64_t first, std::int64_t count) {
  if (first < 0 || count < 0 || first + count > b.batch) {
    throw ContractError("slice_batch: rows out of range");
  }
  TokenBatch out;
  out.batch = count;
  out.seq_len = b.seq_len;
  const auto begin = static_cast<std::size_t>(first * b.seq_len);
  const auto end = static_cast<std::size_t>((first + count) * b.seq_len);
  out.inputs.assign(b.inputs.begin() + begin, b.inputs.begin() + end);
  out.targets.assign(b.targets.begin() + begin, b.targets.begin() + end);
  out.answer_mask.assign(b.answer_mask.begin() + begin, b.answer_mask.begin() + end);
  return out;
}

}  // namespace retrofit
