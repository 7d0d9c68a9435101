#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rmsin/harness/config.hpp"
#include "rmsin/harness/optim.hpp"
#include "rmsin/model.hpp"

// Binary layout, all integers little-endian:
//   "RMSN" u32 version
//   str model_config            (key = value lines)
//   u32 meta_count { str key, str value }
//   u32 tensor_count { str name, u32 rank, i32 extents[rank], f32 values[numel] }
//   u8 has_optimizer [ u64 step, u32 count { str name, f32 m[numel], f32 v[numel] } ]
// where str is u32 length followed by bytes.
namespace rmsin {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string model_config;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, StoredTensor>> tensors;
  bool has_optimizer = false;
  std::uint64_t optimizer_step = 0;
  std::vector<std::pair<std::string, std::pair<std::vector<float>, std::vector<float>>>> moments;

  ModelConfig config() const { return parse_model_config(model_config, "checkpoint config"); }
};

namespace detail {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void floats(const std::vector<float>& v) {
    for (float x : v) f32(x);
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string name) : in_(in), name_(std::move(name)) {}
  std::uint8_t u8() {
    const int c = in_.get();
    if (c == EOF) throw IoError(name_ + ": truncated checkpoint");
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 24)) throw IoError(name_ + ": corrupt string length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (in_.gcount() != static_cast<std::streamsize>(n)) throw IoError(name_ + ": truncated checkpoint");
    return s;
  }
  std::vector<float> floats(std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = f32();
    return v;
  }
  const std::string& name() const { return name_; }

 private:
  std::istream& in_;
  std::string name_;
};

}  // namespace detail

/// Writes to `path` via a temporary file and rename, so an interrupted save
/// never leaves a torn checkpoint behind.
inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ParamSet<float>& params,
                            const AdamW<float>* optimizer = nullptr,
                            const std::map<std::string, std::string>& meta = {}) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    detail::Writer w(out);
    out.write("RMSN", 4);
    w.u32(kCheckpointVersion);
    w.str(model_config_text(config));
    w.u32(static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
      w.str(k);
      w.str(v);
    }
    w.u32(static_cast<std::uint32_t>(params.entries().size()));
    for (const auto& e : params.entries()) {
      w.str(e.name);
      w.u32(static_cast<std::uint32_t>(e.tensor.rank()));
      for (int d : e.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
      for (float x : e.tensor.data()) w.f32(x);
    }
    w.u8(optimizer ? 1 : 0);
    if (optimizer) {
      w.u64(optimizer->steps());
      w.u32(static_cast<std::uint32_t>(optimizer->names().size()));
      for (std::size_t i = 0; i < optimizer->names().size(); ++i) {
        w.str(optimizer->names()[i]);
        w.floats(optimizer->first_moments()[i]);
        w.floats(optimizer->second_moments()[i]);
      }
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  detail::Reader r(in, path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "RMSN", 4) != 0) throw IoError(path.string() + ": not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError(path.string() + ": checkpoint format version " + std::to_string(version) + ", this build reads " +
                  std::to_string(kCheckpointVersion));
  Checkpoint ck;
  ck.model_config = r.str();
  const std::uint32_t nmeta = r.u32();
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.str();
    ck.meta[k] = r.str();
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    StoredTensor t;
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw IoError(path.string() + ": tensor " + name + " has implausible rank");
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<int>(r.u32()));
    t.values = r.floats(shape_numel(t.shape));
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  ck.has_optimizer = r.u8() != 0;
  if (ck.has_optimizer) {
    ck.optimizer_step = r.u64();
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name = r.str();
      std::size_t numel = 0;
      for (const auto& [tn, t] : ck.tensors)
        if (tn == name) numel = t.values.size();
      auto m = r.floats(numel);
      auto v = r.floats(numel);
      ck.moments.emplace_back(std::move(name), std::make_pair(std::move(m), std::move(v)));
    }
  }
  if (in.peek() != EOF) throw IoError(path.string() + ": trailing bytes after checkpoint");
  return ck;
}

/// Lines where two `key = value` texts differ.
inline std::string config_difference(const std::string& a, const std::string& b) {
  auto parse = [](const std::string& t) {
    std::map<std::string, std::string> m;
    std::istringstream in(t);
    for (std::string line; std::getline(in, line);) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) m[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    return m;
  };
  const auto ma = parse(a), mb = parse(b);
  std::string diff;
  for (const auto& [k, v] : ma) {
    auto it = mb.find(k);
    const std::string other = it == mb.end() ? "<missing>" : it->second;
    if (other != v) diff += (diff.empty() ? "" : ", ") + k + " " + other + " vs " + v;
  }
  for (const auto& [k, v] : mb)
    if (!ma.count(k)) diff += (diff.empty() ? "" : ", ") + k + " " + v + " vs <missing>";
  return diff;
}

/// Copies stored values into `model` (and `optimizer`). The stored
/// architecture must equal the model's exactly; the initialization seed may
/// differ.
inline void restore_checkpoint(const Checkpoint& ck, const std::string& source, Rmsin<float>& model,
                               AdamW<float>* optimizer = nullptr) {
  ModelConfig stored = ck.config();
  stored.seed = model.config().seed;
  const std::string expected = model_config_text(model.config()), found = model_config_text(stored);
  if (found != expected)
    throw UsageError(source + ": checkpoint model config differs (" + config_difference(expected, found) + ")");
  auto& entries = model.params().entries();
  if (entries.size() != ck.tensors.size())
    throw UsageError(source + ": checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model has " +
                     std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = ck.tensors[i];
    if (name != entries[i].name || t.shape != entries[i].tensor.shape())
      throw UsageError(source + ": tensor " + name + " " + shape_str(t.shape) + " does not match " + entries[i].name +
                       " " + shape_str(entries[i].tensor.shape()));
    auto dst = entries[i].tensor.mutable_data();
    std::copy(t.values.begin(), t.values.end(), dst.begin());
  }
  if (!optimizer) return;
  if (!ck.has_optimizer) throw UsageError(source + ": checkpoint has no optimizer state");
  if (ck.moments.size() != optimizer->names().size())
    throw UsageError(source + ": optimizer state does not match the model");
  for (std::size_t i = 0; i < ck.moments.size(); ++i) {
    if (ck.moments[i].first != optimizer->names()[i])
      throw UsageError(source + ": optimizer state for " + ck.moments[i].first + " is out of order");
    optimizer->first_moments()[i] = ck.moments[i].second.first;
    optimizer->second_moments()[i] = ck.moments[i].second.second;
  }
  optimizer->set_steps(ck.optimizer_step);
}

/// Builds a model from the config echoed in a checkpoint and loads it.
inline Rmsin<float> load_model(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  Rmsin<float> model(ck.config());
  restore_checkpoint(ck, path.string(), model);
  return model;
}

}  // namespace rmsin
