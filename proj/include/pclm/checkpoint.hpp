#pragma once

// Binary checkpoint: "PCLM", u32 version, u32-length-prefixed config snapshot,
// u32 record count, then per record a u32-length-prefixed name, u32 rank, u32
// dims and float64 payload. All integers and reals are little-endian. Records
// are written in name order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pclm/error.hpp"
#include "pclm/optim.hpp"
#include "pclm/params.hpp"

namespace pclm {

inline constexpr char kCheckpointMagic[4] = {'P', 'C', 'L', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_snapshot;
  std::map<std::string, Tensor> records;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw TruncatedError(std::string("checkpoint: truncated while reading ") + what);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_str(out, ckpt.config_snapshot);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& [name, t] : ckpt.records) {
    detail::put_str(out, name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double x : t.data()) detail::put_f64(out, x);
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    if (bytes.size() < 4 && std::string(kCheckpointMagic, 4).starts_with(bytes)) {
      throw TruncatedError("checkpoint: truncated inside the magic bytes");
    }
    throw BadMagicError("checkpoint: bad magic (not a PCLM checkpoint)");
  }
  detail::Reader r(bytes);
  (void)r.u32("magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: format version " + std::to_string(version) +
                       " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config_snapshot = r.str("config snapshot");
  const std::uint32_t count = r.u32("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str("record name");
    const std::uint32_t rank = r.u32("rank");
    r.need(std::size_t{4} * rank, "dims");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u32("dims"));
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / 8) throw TruncatedError("checkpoint: truncated payload of '" + name + "'");
    std::vector<double> data(n);
    for (double& x : data) x = r.f64();
    if (!ckpt.records.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
      throw CheckpointError("checkpoint: duplicate record '" + name + "'");
    }
  }
  if (r.remaining() != 0) {
    throw CheckpointError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return ckpt;
}

// Written to a temporary sibling and renamed into place.
inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("checkpoint: write failure on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: cannot move " + tmp.string() + " into place: " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

enum class LoadMode { eval, train };

// Parameters from a checkpoint. eval takes encoder.* only; train also
// requires pathway.*.
inline ParameterStore params_from_checkpoint(const Checkpoint& ckpt, LoadMode mode) {
  ParameterStore store;
  bool has_pathway = false;
  for (const auto& [name, t] : ckpt.records) {
    if (name.starts_with(kEncoderPrefix)) store.add(name, t.clone());
    if (name.starts_with(kPathwayPrefix)) {
      has_pathway = true;
      if (mode == LoadMode::train) store.add(name, t.clone());
    }
  }
  if (!store.has_prefix(kEncoderPrefix)) throw MissingTensorError("checkpoint: no encoder.* tensors");
  if (mode == LoadMode::train && !has_pathway) {
    throw MissingPathwayError("checkpoint: training needs pathway.* tensors, none found");
  }
  return store;
}

inline constexpr std::string_view kOptimPrefix = "optim.";

inline void add_params(Checkpoint& ckpt, const ParameterStore& params) {
  for (const auto& [name, t] : params.tensors()) ckpt.records[name] = t.detach();
}

inline void add_optimizer(Checkpoint& ckpt, const AdamState& state, const ParameterStore& params) {
  ckpt.records["optim.step"] = Tensor::scalar(static_cast<double>(state.step));
  for (const auto& [name, t] : params.tensors()) {
    auto moment = [&](const std::map<std::string, std::vector<double>>& src) {
      auto it = src.find(name);
      return it == src.end() ? Tensor(t.shape()) : Tensor(t.shape(), it->second);
    };
    ckpt.records["optim.m." + name] = moment(state.m);
    ckpt.records["optim.v." + name] = moment(state.v);
  }
}

inline bool has_optimizer(const Checkpoint& ckpt) { return ckpt.records.contains("optim.step"); }

inline AdamState optimizer_from_checkpoint(const Checkpoint& ckpt, const ParameterStore& params) {
  auto find = [&](const std::string& name) -> const Tensor& {
    auto it = ckpt.records.find(name);
    if (it == ckpt.records.end()) throw MissingTensorError("checkpoint: missing '" + name + "'");
    return it->second;
  };
  AdamState s;
  s.step = static_cast<std::uint64_t>(find("optim.step").item());
  for (const auto& [name, t] : params.tensors()) {
    for (auto [prefix, dst] : {std::pair{"optim.m.", &s.m}, std::pair{"optim.v.", &s.v}}) {
      const std::string key = prefix + name;
      const Tensor& rec = find(key);
      if (rec.shape() != t.shape()) {
        throw CheckpointError("checkpoint: '" + key + "' has shape " +
                              shape_str(rec.shape()) + ", parameter has " + shape_str(t.shape()));
      }
      (*dst)[name] = rec.values();
    }
  }
  return s;
}

}  // namespace pclm
