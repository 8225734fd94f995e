// SPDX-License-Identifier: Apache-2.0

#include "retrofit/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "retrofit/errors.hpp"
#include "retrofit/json_io.hpp"

namespace retrofit {
namespace {

constexpr char kMagic[8] = {'R', 'T', 'R', 'F', 'C', 'K', 'P', 'T'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return value;
}

void append_doubles(std::string& out, std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    const auto* p = reinterpret_cast<const char*>(values.data());
    out.append(p, values.size() * sizeof(double));
  } else {
    for (double v : values) put_le(out, std::bit_cast<std::uint64_t>(v));
  }
}

std::vector<double> read_doubles(const std::string& in, std::size_t pos, std::size_t count) {
  std::vector<double> values(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), in.data() + pos, count * sizeof(double));
  } else {
    for (std::size_t i = 0; i < count; ++i)
      values[i] = std::bit_cast<double>(get_le<std::uint64_t>(in, pos + 8 * i));
  }
  return values;
}

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
  if (!t.defined()) throw FormatError("checkpoint: tensor '" + name + "' is undefined");
  for (auto& [n, existing] : tensors_) {
    if (n == name) {
      existing = t.detached();
      return;
    }
  }
  tensors_.emplace_back(name, t.detached());
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(tensors_.begin(), tensors_.end(),
                     [&](const auto& entry) { return entry.first == name; });
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_) {
    if (n == name) return t;
  }
  throw FormatError("checkpoint: missing tensor '" + name + "'");
}

std::vector<TensorEntry> Checkpoint::directory() const {
  std::vector<TensorEntry> dir;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    const auto nbytes = static_cast<std::uint64_t>(t.size()) * sizeof(double);
    dir.push_back(TensorEntry{name, t.shape(), "f64", offset, nbytes});
    offset += nbytes;
  }
  return dir;
}

std::string Checkpoint::serialize() const {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["metadata"] = metadata;
  header["tensors"] = nlohmann::json::array();
  for (const auto& e : directory()) {
    header["tensors"].push_back(
        {{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}, {"offset", e.offset},
         {"nbytes", e.nbytes}});
  }
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, t] : tensors_) append_doubles(out, t.data());
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  constexpr std::size_t kPrefix = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < kPrefix || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = get_le<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 12);
  if (header_len > bytes.size() - kPrefix) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kPrefix, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  const std::size_t payload_start = kPrefix + header_len;
  const std::uint64_t payload_len = bytes.size() - payload_start;

  Checkpoint ckpt;
  try {
    if (header.at("format_version").get<std::uint32_t>() != version) {
      throw FormatError("checkpoint: header version disagrees with prefix");
    }
    ckpt.metadata = header.at("metadata");
    std::set<std::string> names;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    for (const auto& entry : header.at("tensors")) {
      TensorEntry e{entry.at("name").get<std::string>(), entry.at("shape").get<Shape>(),
                    entry.at("dtype").get<std::string>(), entry.at("offset").get<std::uint64_t>(),
                    entry.at("nbytes").get<std::uint64_t>()};
      if (e.dtype != "f64") throw FormatError("checkpoint: unsupported dtype " + e.dtype);
      if (!names.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor " + e.name);
      if (e.shape.empty() || std::any_of(e.shape.begin(), e.shape.end(), [](auto d) { return d <= 0; }) ||
          e.nbytes != static_cast<std::uint64_t>(numel(e.shape)) * sizeof(double)) {
        throw FormatError("checkpoint: inconsistent shape for " + e.name);
      }
      if (e.offset > payload_len || e.nbytes > payload_len - e.offset) {
        throw FormatError("checkpoint: tensor " + e.name + " lies outside the payload");
      }
      ranges.emplace_back(e.offset, e.offset + e.nbytes);
      ckpt.tensors_.emplace_back(
          e.name, Tensor(e.shape, read_doubles(bytes, payload_start + e.offset,
                                               static_cast<std::size_t>(e.nbytes / sizeof(double)))));
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i) {
      if (ranges[i].first < ranges[i - 1].second) throw FormatError("checkpoint: overlapping tensors");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp + " for writing");
    const std::string bytes = ckpt.serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return Checkpoint::deserialize(ss.str());
}

// ---------------------------------------------------------------------------
// Model schema

namespace {

Shape param_shape(const ModelConfig& cfg, const std::string& name) {
  const auto h = cfg.hidden, kv = cfg.kv_width(), f = cfg.ffn, v = cfg.vocab_size;
  const auto leaf = name.substr(name.rfind('.') + 1);
  if (leaf == "embedding") return {v, h};
  if (leaf == "unembedding") return {h, v};
  if (leaf == "adapter") return {2 * h, h};
  if (leaf == "final_norm" || leaf == "attn_norm" || leaf == "mlp_norm" || leaf == "q_norm") return {h};
  if (leaf == "k_norm") return {kv};
  if (leaf == "wq" || leaf == "wo") return {h, h};
  if (leaf == "wk" || leaf == "wv") return {h, kv};
  if (leaf == "w_gate" || leaf == "w_up") return {h, f};
  if (leaf == "w_down") return {f, h};
  throw FormatError("checkpoint: unknown parameter " + name);
}

template <typename Model>
void store_params(Model m, Checkpoint& ckpt) {
  for_each_parameter(m, [&](const std::string& name, Tensor& t, ParamRole) { ckpt.put(name, t); });
}

template <typename Model>
void load_params(Model& m, const Checkpoint& ckpt) {
  for_each_parameter(m, [&](const std::string& name, Tensor& t, ParamRole) {
    const Tensor& src = ckpt.get(name);
    if (src.shape() != param_shape(m.config, name)) {
      throw FormatError("checkpoint: tensor " + name + " has shape " + to_string(src.shape()) +
                        ", model schema expects " + to_string(param_shape(m.config, name)));
    }
    t = src;
  });
}

ModelConfig read_config(const Checkpoint& ckpt, const char* kind) {
  if (checkpoint_kind(ckpt) != kind) {
    throw FormatError("checkpoint: expected a " + std::string(kind) + " model, found " +
                      checkpoint_kind(ckpt));
  }
  try {
    auto cfg = ckpt.metadata.at("config").get<ModelConfig>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad model config: ") + e.what());
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: bad model config: ") + e.what());
  }
}

std::int64_t read_count(const Checkpoint& ckpt, const char* key) {
  try {
    const auto n = ckpt.metadata.at(key).get<std::int64_t>();
    if (n < 0) throw FormatError(std::string("checkpoint: negative ") + key);
    return n;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: missing ") + key + ": " + e.what());
  }
}

}  // namespace

std::string checkpoint_kind(const Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("kind") || !ckpt.metadata["kind"].is_string()) {
    throw FormatError("checkpoint: metadata has no model kind");
  }
  return ckpt.metadata["kind"].get<std::string>();
}

Checkpoint to_checkpoint(const FixedModel& model) {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "fixed";
  ckpt.metadata["config"] = model.config;
  ckpt.metadata["depth"] = model.blocks.size();
  store_params(model, ckpt);
  return ckpt;
}

Checkpoint to_checkpoint(const RecurrentModel& model) {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "recurrent";
  ckpt.metadata["config"] = model.config;
  ckpt.metadata["prelude"] = model.prelude.size();
  ckpt.metadata["recurrent"] = model.recurrent.size();
  ckpt.metadata["coda"] = model.coda.size();
  store_params(model, ckpt);
  return ckpt;
}

FixedModel fixed_from_checkpoint(const Checkpoint& ckpt) {
  FixedModel m;
  m.config = read_config(ckpt, "fixed");
  m.blocks.resize(static_cast<std::size_t>(read_count(ckpt, "depth")));
  load_params(m, ckpt);
  return m;
}

RecurrentModel recurrent_from_checkpoint(const Checkpoint& ckpt) {
  RecurrentModel m;
  m.config = read_config(ckpt, "recurrent");
  m.prelude.resize(static_cast<std::size_t>(read_count(ckpt, "prelude")));
  m.recurrent.resize(static_cast<std::size_t>(read_count(ckpt, "recurrent")));
  m.coda.resize(static_cast<std::size_t>(read_count(ckpt, "coda")));
  load_params(m, ckpt);
  return m;
}

}  // namespace retrofit
