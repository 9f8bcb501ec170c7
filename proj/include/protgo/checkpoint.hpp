#pragma once

// Checkpoint files.
//
// Layout (all integers little-endian):
//
//   offset 0   4 bytes   magic "PGO1"
//   offset 4   8 bytes   u64 header length H
//   offset 12  H bytes   UTF-8 JSON header
//   offset 12+H          payload: raw f64 arrays
//
// The header records format_version, the model config, the freeze mask, the
// RNG state, training progress, payload_bytes and one entry per array
// {name, dtype "f64", shape, offset, bytes}, offsets relative to the start of
// the payload. Optimiser moments are stored as arrays named
// "adam.m/<param>" and "adam.v/<param>".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protgo/error.hpp"
#include "protgo/model.hpp"

namespace protgo {

inline constexpr char kCheckpointMagic[4] = {'P', 'G', 'O', '1'};
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  using Error::Error;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct OptimizerState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;

  bool operator==(const OptimizerState&) const = default;
};

struct TrainingProgress {
  std::size_t epochs_completed = 0;
  std::uint64_t global_step = 0;
};

struct ModelCheckpoint {
  int format_version = kCheckpointVersion;
  ModelConfig config;
  std::vector<NamedArray> arrays;
  FreezeMask freeze_mask;
  std::optional<OptimizerState> optimizer;
  std::string rng_state;
  TrainingProgress progress;
  nlohmann::json metadata = nlohmann::json::object();

  const NamedArray* find(std::string_view name) const {
    for (const auto& a : arrays) {
      if (a.name == name) return &a;
    }
    return nullptr;
  }
};

inline ModelCheckpoint snapshot(const Model& model) {
  ModelCheckpoint ck;
  ck.config = model.config();
  ck.freeze_mask = model.freeze_mask();
  for (const auto& p : model.parameters()) ck.arrays.push_back({p.name, p.tensor.shape(), p.tensor.values()});
  return ck;
}

// Loads parameter values into a model, checking every array against the model's shapes.
inline void restore(Model& model, const ModelCheckpoint& ck) {
  for (auto& p : model.parameters()) {
    const auto* a = ck.find(p.name);
    if (!a) throw CheckpointShapeError("checkpoint has no array '" + p.name + "'");
    if (a->shape != p.tensor.shape()) {
      throw CheckpointShapeError("array '" + p.name + "' has shape " + shape_str(a->shape) + " but the model expects " +
                                 shape_str(p.tensor.shape()));
    }
  }
  for (auto& p : model.parameters()) p.tensor.values() = ck.find(p.name)->data;
}

inline Model model_from_checkpoint(const ModelCheckpoint& ck) {
  Model m(ck.config);
  restore(m, ck);
  return m;
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f64s(std::string& out, const std::vector<double>& values) {
  for (double d : values) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

// Writes to a sibling temporary file and renames it into place.
inline void write_file_atomically(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace detail

inline std::string encode_checkpoint(const ModelCheckpoint& ck) {
  std::vector<const NamedArray*> all;
  std::vector<NamedArray> moments;
  for (const auto& a : ck.arrays) all.push_back(&a);
  if (ck.optimizer) {
    for (const auto& a : ck.arrays) {
      const auto m = ck.optimizer->first_moment.find(a.name);
      const auto v = ck.optimizer->second_moment.find(a.name);
      if (m != ck.optimizer->first_moment.end()) moments.push_back({"adam.m/" + a.name, a.shape, m->second});
      if (v != ck.optimizer->second_moment.end()) moments.push_back({"adam.v/" + a.name, a.shape, v->second});
    }
    for (const auto& a : moments) all.push_back(&a);
  }

  nlohmann::json header;
  header["format_version"] = ck.format_version;
  header["config"] = ck.config;
  header["freeze_mask"] = ck.freeze_mask;
  header["rng_state"] = ck.rng_state;
  header["progress"] = {{"epochs_completed", ck.progress.epochs_completed}, {"global_step", ck.progress.global_step}};
  header["metadata"] = ck.metadata;
  if (ck.optimizer) header["optimizer"] = {{"step", ck.optimizer->step}};
  auto& entries = header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto* a : all) {
    if (shape_numel(a->shape) != a->data.size()) {
      throw CheckpointShapeError("array '" + a->name + "' does not match its shape " + shape_str(a->shape));
    }
    const std::uint64_t bytes = a->data.size() * sizeof(double);
    entries.push_back({{"name", a->name}, {"dtype", "f64"}, {"shape", a->shape}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  header["payload_bytes"] = offset;

  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto* a : all) detail::put_f64s(out, a->data);
  return out;
}

inline void save_checkpoint(const ModelCheckpoint& ck, const std::filesystem::path& path) {
  detail::write_file_atomically(path, encode_checkpoint(ck));
}

inline ModelCheckpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12) throw CheckpointTruncatedError("truncated checkpoint: file shorter than the fixed preamble");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CheckpointError("not a checkpoint: bad magic bytes");
  const std::uint64_t header_len = detail::get_u64(bytes.data() + 4);
  if (bytes.size() - 12 < header_len) throw CheckpointTruncatedError("truncated checkpoint: header cut short");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }

  ModelCheckpoint ck;
  ck.format_version = header.at("format_version").get<int>();
  if (ck.format_version != kCheckpointVersion) {
    throw CheckpointVersionError("unsupported checkpoint format_version " + std::to_string(ck.format_version) +
                                 " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t payload_start = 12 + header_len;
  const std::uint64_t payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
  if (bytes.size() - payload_start < payload_bytes) {
    throw CheckpointTruncatedError("truncated checkpoint: payload has " +
                                   std::to_string(bytes.size() - payload_start) + " of " +
                                   std::to_string(payload_bytes) + " bytes");
  }
  if (bytes.size() - payload_start > payload_bytes) throw CheckpointError("trailing bytes after checkpoint payload");

  ck.config = header.at("config").get<ModelConfig>();
  ck.config.validate();
  ck.freeze_mask = header.at("freeze_mask").get<FreezeMask>();
  ck.rng_state = header.at("rng_state").get<std::string>();
  ck.progress.epochs_completed = header.at("progress").at("epochs_completed").get<std::size_t>();
  ck.progress.global_step = header.at("progress").at("global_step").get<std::uint64_t>();
  ck.metadata = header.value("metadata", nlohmann::json::object());
  if (header.contains("optimizer")) {
    ck.optimizer = OptimizerState{};
    ck.optimizer->step = header["optimizer"].at("step").get<std::uint64_t>();
  }

  for (const auto& e : header.at("arrays")) {
    NamedArray a;
    a.name = e.at("name").get<std::string>();
    a.shape = e.at("shape").get<Shape>();
    if (e.at("dtype").get<std::string>() != "f64") throw CheckpointError("array '" + a.name + "' has unsupported dtype");
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto nbytes = e.at("bytes").get<std::uint64_t>();
    if (nbytes != shape_numel(a.shape) * sizeof(double)) {
      throw CheckpointShapeError("array '" + a.name + "' byte count does not match shape " + shape_str(a.shape));
    }
    if (offset + nbytes > payload_bytes) throw CheckpointTruncatedError("truncated checkpoint: array '" + a.name + "'");
    a.data.resize(shape_numel(a.shape));
    const char* p = bytes.data() + payload_start + offset;
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] = std::bit_cast<double>(detail::get_u64(p + 8 * i));

    if (a.name.starts_with("adam.m/") || a.name.starts_with("adam.v/")) {
      if (!ck.optimizer) throw CheckpointError("optimizer array '" + a.name + "' without optimizer state");
      auto& target = a.name[5] == 'm' ? ck.optimizer->first_moment : ck.optimizer->second_moment;
      target[a.name.substr(7)] = std::move(a.data);
    } else {
      ck.arrays.push_back(std::move(a));
    }
  }

  // Shapes must agree with the config the header declares.
  for (const auto& spec : parameter_layout(ck.config)) {
    const auto* a = ck.find(spec.name);
    if (!a) throw CheckpointShapeError("checkpoint is missing array '" + spec.name + "'");
    if (a->shape != spec.shape) {
      throw CheckpointShapeError("array '" + spec.name + "' has shape " + shape_str(a->shape) +
                                 " but its config implies " + shape_str(spec.shape));
    }
  }
  return ck;
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
}

}  // namespace protgo
