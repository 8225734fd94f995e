// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random stream. Every draw is a pure function of
// (seed, label, counter), so runs replay exactly and sub-streams can be
// derived per step without threading state through the program.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace retrofit {

class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::string_view label, std::uint64_t counter = 0);

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  std::uint64_t poisson(double lambda);

  // Independent stream keyed by this stream's seed, label and `index`.
  RandomStream fork(std::string_view sublabel, std::uint64_t index = 0) const;

 private:
  std::uint64_t seed_;
  std::string label_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace retrofit
