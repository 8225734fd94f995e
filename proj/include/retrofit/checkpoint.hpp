// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file format (little-endian throughout):
//
//   magic        8 bytes   "RTRFCKPT"
//   version      u32       1
//   header_len   u64
//   header       header_len bytes of JSON:
//                  {"format_version": 1, "metadata": {...},
//                   "tensors": [{"name", "shape", "dtype": "f64", "offset", "nbytes"}, ...]}
//   payload      raw IEEE-754 doubles; offsets are relative to payload start
//
// The writer lays tensors out back to back in insertion order, so
// write(read(bytes)) reproduces the input bytes exactly.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "retrofit/model.hpp"
#include "retrofit/tensor.hpp"

namespace retrofit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  Shape shape;
  std::string dtype = "f64";
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
  friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

class Checkpoint {
 public:
  nlohmann::json metadata = nlohmann::json::object();

  void put(const std::string& name, const Tensor& t);
  bool contains(const std::string& name) const;
  // Throws FormatError when missing.
  const Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

  std::vector<TensorEntry> directory() const;

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);

 private:
  std::vector<std::pair<std::string, Tensor>> tensors_;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Model <-> checkpoint. Metadata "kind" is "fixed" or "recurrent"; readers
// verify every tensor the schema names is present with the expected shape.
Checkpoint to_checkpoint(const FixedModel& model);
Checkpoint to_checkpoint(const RecurrentModel& model);
FixedModel fixed_from_checkpoint(const Checkpoint& ckpt);
RecurrentModel recurrent_from_checkpoint(const Checkpoint& ckpt);
std::string checkpoint_kind(const Checkpoint& ckpt);

}  // namespace retrofit
