#pragma once

// PRKT checkpoint files.
//
//   "PRKT" | u32 version | u64 json_len | json | u32 count | count x section
//   section: u32 name_len | name | u32 rank | rank x u32 dim | f32 payload
//
// All integers and floats little-endian. The JSON blob carries the model
// config, so a checkpoint loads without any external description.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patentret/model.hpp"
#include "patentret/optim.hpp"

namespace patentret {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<float> params;
  std::optional<OptimizerState<float>> optimizer;
  nlohmann::json train_config = nlohmann::json::object();
  std::vector<std::string> class_names;  // label index -> patent_id
};

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size() || pos_ + n < pos_)
      throw CheckpointError(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_all(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

inline void put_section(std::string& out, const std::string& name, const Shape& shape, const std::vector<float>& data) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (float f : data) put_f32(out, f);
}

}  // namespace io

/// 64-bit FNV-1a over a byte string; used as a model fingerprint.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string file_fingerprint(const std::filesystem::path& path) { return hex64(fnv1a64(io::read_all(path))); }

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  auto& params = const_cast<ModelParams<float>&>(ck.params);
  nlohmann::json meta;
  meta["model"] = params.config;
  meta["train"] = ck.train_config;
  meta["class_names"] = ck.class_names;
  meta["optimizer_step"] = ck.optimizer ? nlohmann::json(ck.optimizer->step) : nlohmann::json(nullptr);
  const std::string blob = meta.dump();

  auto tensors = params.all_tensors();
  std::uint32_t count = static_cast<std::uint32_t>(tensors.size());
  if (ck.optimizer) count += 2 * static_cast<std::uint32_t>(params.trainable().size());

  std::string out = "PRKT";
  io::put_u32(out, kCheckpointVersion);
  io::put_u64(out, blob.size());
  out += blob;
  io::put_u32(out, count);
  for (const auto& [name, t] : tensors) io::put_section(out, name, t->shape, t->data);
  if (ck.optimizer) {
    for (const auto& [name, t] : params.trainable()) {
      for (const char* which : {"m", "v"}) {
        const auto& moments = which[0] == 'm' ? ck.optimizer->m : ck.optimizer->v;
        auto it = moments.find(name);
        std::vector<float> data = it != moments.end() ? it->second : std::vector<float>(t->data.size(), 0.0f);
        io::put_section(out, std::string("adam.") + which + "." + name, t->shape, data);
      }
    }
  }
  return out;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_all(path, serialize_checkpoint(ck));
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  io::Reader r(bytes, what);
  if (r.str(4) != "PRKT") throw CheckpointError(what + ": bad magic (not a PRKT checkpoint)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(what + ": unsupported version " + std::to_string(version));
  const auto json_len = r.u64();
  r.need(json_len);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str(json_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(what + ": corrupt config blob: " + e.what());
  }

  Checkpoint ck;
  ModelConfig config;
  try {
    config = meta.at("model").get<ModelConfig>();
    ck.train_config = meta.value("train", nlohmann::json::object());
    ck.class_names = meta.value("class_names", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(what + ": config blob missing fields: " + e.what());
  }
  // Shapes come from a fresh init of the embedded config; the file must match.
  ck.params = init_params<float>(config, 0);
  std::map<std::string, Tensor<float>*> slots;
  for (auto& [name, t] : ck.params.all_tensors()) slots[name] = t;
  std::map<std::string, Shape> trainable_shapes;
  for (auto& [name, t] : ck.params.trainable()) trainable_shapes[name] = t->shape;

  const bool has_optimizer = !meta.value("optimizer_step", nlohmann::json(nullptr)).is_null();
  if (has_optimizer) {
    ck.optimizer.emplace();
    ck.optimizer->step = meta.at("optimizer_step").get<long>();
  }

  const auto count = r.u32();
  std::size_t loaded = 0;
  for (std::uint32_t s = 0; s < count; ++s) {
    const std::string name = r.str(r.u32());
    const auto rank = r.u32();
    if (rank > 8) throw CheckpointError(what + ": section " + name + " has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = numel(shape);
    r.need(n * 4);
    std::vector<float> data(n);
    for (auto& f : data) f = r.f32();

    auto mismatch = [&](const Shape& expected) {
      return CheckpointError(what + ": section " + name + " has shape " + to_string(shape) + " but the architecture expects " +
                             to_string(expected) + " (embed_dim " + std::to_string(config.embed_dim) + ")");
    };
    if (name.rfind("adam.", 0) == 0) {
      if (!ck.optimizer) throw CheckpointError(what + ": optimizer section without optimizer state");
      const bool first = name.compare(5, 2, "m.") == 0;
      const std::string pname = name.substr(7);
      auto it = trainable_shapes.find(pname);
      if (it == trainable_shapes.end()) throw CheckpointError(what + ": unknown optimizer section " + name);
      if (it->second != shape) throw mismatch(it->second);
      (first ? ck.optimizer->m : ck.optimizer->v)[pname] = std::move(data);
      continue;
    }
    auto it = slots.find(name);
    if (it == slots.end()) throw CheckpointError(what + ": unknown section " + name);
    if (it->second->shape != shape) throw mismatch(it->second->shape);
    it->second->data = std::move(data);
    ++loaded;
  }
  if (loaded != slots.size())
    throw CheckpointError(what + ": expected " + std::to_string(slots.size()) + " parameter sections, found " +
                          std::to_string(loaded));
  if (!r.at_end()) throw CheckpointError(what + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::read_all(path), path.string());
}

/// Loads and checks the architecture against `expected`.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  auto ck = load_checkpoint(path);
  const auto& got = ck.params.config;
  if (got.embed_dim != expected.embed_dim)
    throw CheckpointError(path.string() + ": embed_dim " + std::to_string(got.embed_dim) + " does not match expected " +
                          std::to_string(expected.embed_dim));
  if (nlohmann::json(got) != nlohmann::json(expected))
    throw CheckpointError(path.string() + ": architecture " + nlohmann::json(got).dump() + " does not match expected " +
                          nlohmann::json(expected).dump());
  return ck;
}

}  // namespace patentret
