// SPDX-License-Identifier: Apache-2.0

#include "retrofit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#include "retrofit/errors.hpp"

namespace retrofit {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
  }
  if (numel(shape_) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::span<const double> Tensor::data() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::with_node(NodeId id) const {
  Tensor t = *this;
  t.node_ = id;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.node_.reset();
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Tape

namespace {
std::atomic<std::uint64_t> g_next_tape_id{1};
thread_local Tape* g_active = nullptr;
}  // namespace

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

Tensor Tape::watch(const Tensor& t) {
  if (!t.defined()) throw ContractError("cannot watch an undefined tensor");
  records_.push_back(Record{t.shape(), {}, nullptr});
  return t.with_node(NodeId{id_, records_.size() - 1});
}

Tensor Tape::record(Tensor result, std::span<const Tensor* const> inputs, BackwardFn fn) {
  Record rec{result.shape(), {}, std::move(fn)};
  rec.parents.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    const auto& node = in->node();
    if (node && node->tape != id_) {
      throw ContractError("operand is tracked by a different tape");
    }
    rec.parents.push_back(node ? std::optional<std::size_t>(node->index) : std::nullopt);
  }
  records_.push_back(std::move(rec));
  return result.with_node(NodeId{id_, records_.size() - 1});
}

Tape* active_tape() { return g_active; }

bool needs_grad(const Tensor& t) {
  return g_active != nullptr && t.node().has_value() && t.node()->tape == g_active->id();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = previous_; }

NoGradScope::NoGradScope() : previous_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = previous_; }

// ---------------------------------------------------------------------------
// Gradients

Gradients::Gradients(std::uint64_t tape, std::vector<std::vector<double>> grads,
                     std::vector<Shape> shapes)
    : tape_(tape), grads_(std::move(grads)), shapes_(std::move(shapes)) {}

std::optional<Tensor> Gradients::of(const Tensor& t) const {
  const auto& node = t.node();
  if (!node || node->tape != tape_ || node->index >= grads_.size()) return std::nullopt;
  const auto& g = grads_[node->index];
  if (g.empty()) return std::nullopt;
  return Tensor(shapes_[node->index], g);
}

Tensor Gradients::of_or_zero(const Tensor& t) const {
  if (auto g = of(t)) return *g;
  return Tensor::zeros(t.shape());
}

Gradients backward(const Tensor& loss, const Tape& tape) {
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  const auto& node = loss.node();
  if (!node || node->tape != tape.id()) {
    throw ContractError("loss is not recorded on this tape");
  }
  const std::size_t n = tape.size();
  std::vector<std::vector<double>> grads(n);
  std::vector<Shape> shapes(n);
  for (std::size_t i = 0; i < n; ++i) shapes[i] = tape.at(i).shape;
  grads[node->index].assign(1, 1.0);

  std::vector<std::span<double>> slots;
  for (std::size_t i = node->index + 1; i-- > 0;) {
    const auto& rec = tape.at(i);
    if (grads[i].empty() || !rec.backward) continue;
    slots.assign(rec.parents.size(), std::span<double>{});
    bool any = false;
    for (std::size_t p = 0; p < rec.parents.size(); ++p) {
      if (!rec.parents[p]) continue;
      auto& g = grads[*rec.parents[p]];
      if (g.empty()) g.assign(static_cast<std::size_t>(numel(shapes[*rec.parents[p]])), 0.0);
      slots[p] = std::span<double>(g);
      any = true;
    }
    if (any) rec.backward(grads[i], slots);
  }
  return Gradients(tape.id(), std::move(grads), std::move(shapes));
}

Tensor detach(const Tensor& t) { return t.detached(); }

Tensor draw_normal(RandomStream& stream, Shape shape, double mean, double std) {
  if (!(std >= 0.0)) throw ContractError("draw_normal: std must be non-negative");
  std::vector<double> data(static_cast<std::size_t>(numel(shape)));
  for (auto& v : data) v = mean + std * stream.normal();
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace retrofit
