// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors and the reverse-mode gradient tape.
//
// A Tensor is an immutable value: a shape plus shared, read-only storage.
// When a Tape is active (see TapeScope) every differentiable op that reads a
// tracked tensor appends a record to the tape and tags its result with the
// new node id. `backward` walks the records in reverse.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retrofit/random.hpp"

namespace retrofit {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct NodeId {
  std::uint64_t tape = 0;
  std::size_t index = 0;
  friend bool operator==(const NodeId&, const NodeId&) = default;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  bool defined() const { return data_ != nullptr; }

  std::span<const double> data() const;
  const double* raw() const { return data_->data(); }
  double item() const;
  double at(std::int64_t i, std::int64_t j) const { return (*data_)[i * shape_.back() + j]; }

  const std::optional<NodeId>& node() const { return node_; }
  Tensor with_node(NodeId id) const;
  // Shares storage, clears the node.
  Tensor detached() const;
  bool shares_storage(const Tensor& other) const { return data_ == other.data_; }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  std::optional<NodeId> node_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

// Backward rule: receives d(loss)/d(output) and one gradient buffer per
// recorded input. A buffer is empty when that input is not tracked; rules
// must skip work for empty buffers and accumulate (+=) into the rest.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::span<double>> grad_in)>;

class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return records_.size(); }

  // Registers `t` as a leaf; gradients for the returned tensor are reported
  // by `backward`.
  Tensor watch(const Tensor& t);

  // Appends an op record. `inputs` are the op operands in order; untracked
  // operands are passed through as empty buffers to `fn`.
  Tensor record(Tensor result, std::span<const Tensor* const> inputs, BackwardFn fn);

  struct Record {
    Shape shape;
    std::vector<std::optional<std::size_t>> parents;
    BackwardFn backward;
  };
  const Record& at(std::size_t i) const { return records_.at(i); }

 private:
  std::uint64_t id_;
  std::vector<Record> records_;
};

// Tape that ops record onto for the calling thread, or nullptr.
Tape* active_tape();
// True when `t` is tracked by the active tape (so an op on it must record).
bool needs_grad(const Tensor& t);

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording; results computed inside carry no node.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

class Gradients {
 public:
  Gradients() = default;
  Gradients(std::uint64_t tape, std::vector<std::vector<double>> grads, std::vector<Shape> shapes);

  // Gradient for a tracked tensor; nullopt when it is untracked or received
  // no gradient contribution.
  std::optional<Tensor> of(const Tensor& t) const;
  // Same as `of`, but zeros of the right shape when there is no contribution.
  Tensor of_or_zero(const Tensor& t) const;

 private:
  std::uint64_t tape_ = 0;
  std::vector<std::vector<double>> grads_;
  std::vector<Shape> shapes_;
};

// Reverse accumulation from a scalar `loss` recorded on `tape`.
Gradients backward(const Tensor& loss, const Tape& tape);

Tensor detach(const Tensor& t);

Tensor draw_normal(RandomStream& stream, Shape shape, double mean, double std);

}  // namespace retrofit
