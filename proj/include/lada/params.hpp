#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lada/rng.hpp"
#include "lada/tape.hpp"
#include "lada/tensor.hpp"

namespace lada {

/// Named parameter tensors. Ordered, so iteration (and serialization) order
/// is a function of the names alone.
template <class T>
using BasicParamMap = std::map<std::string, BasicTensor<T>>;
using ParamMap = BasicParamMap<float>;

template <class U, class T>
BasicParamMap<U> cast_params(const BasicParamMap<T>& params) {
  BasicParamMap<U> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<U>());
  return out;
}

inline bool params_finite(const ParamMap& params) {
  for (const auto& [name, t] : params) {
    if (!t.all_finite()) return false;
  }
  return true;
}

inline std::size_t param_count(const ParamMap& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

/// Parameters placed on a tape as leaves.
template <class T>
class Bound {
 public:
  Bound(Tape<T>& tape, const BasicParamMap<T>& params, bool requires_grad) {
    for (const auto& [name, t] : params) vars_.emplace(name, tape.leaf(t, requires_grad));
  }

  Var<T> operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ValidationError("missing parameter '" + name + "'");
    return it->second;
  }

  /// Gradients of every bound parameter after a backward sweep.
  BasicParamMap<T> grads() const {
    BasicParamMap<T> out;
    for (const auto& [name, v] : vars_) out.emplace(name, v.tape->grad(v));
    return out;
  }

  /// Adds this pass's gradients into `acc`, scaled by `weight`.
  void accumulate_grads(BasicParamMap<T>& acc, T weight = T(1)) const {
    for (const auto& [name, v] : vars_) {
      auto g = v.tape->grad(v);
      auto [it, inserted] = acc.try_emplace(name, BasicTensor<T>(g.dims()));
      auto& dst = it->second;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += weight * g[i];
    }
  }

 private:
  std::map<std::string, Var<T>> vars_;
};

// ---------------------------------------------------------------- initialization

/// Uniform in ±1/sqrt(fan_in).
inline Tensor fan_in_uniform(Rng& rng, Dims dims, int fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor<float>(std::move(dims), -bound, bound);
}

inline Tensor conv_weight(Rng& rng, int out_ch, int in_ch, int k) {
  return fan_in_uniform(rng, Dims{out_ch, in_ch, k, k}, in_ch * k * k);
}

inline Tensor dense_weight(Rng& rng, int out_dim, int in_dim) {
  return fan_in_uniform(rng, Dims{out_dim, in_dim}, in_dim);
}

// ---------------------------------------------------------------- checkpoints
//
// Layout: "LADA", u32 format version, then records until end of stream:
// u32 name length, name bytes, u32 rank, u32 dims[rank], f32 payload.
// All integers and floats are little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
      static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  return true;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParamMap& params) {
  os.write("LADA", 4);
  detail::put_u32(os, kCheckpointVersion);
  for (const auto& [name, t] : params) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.dims()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.values()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw std::runtime_error("checkpoint write failed");
}

inline ParamMap read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "LADA", 4) != 0) throw ValidationError("checkpoint: bad magic");
  std::uint32_t version = 0;
  if (!detail::get_u32(is, version)) throw ValidationError("checkpoint: truncated header");
  if (version != kCheckpointVersion) throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  ParamMap params;
  std::uint32_t name_len = 0;
  while (detail::get_u32(is, name_len)) {
    if (name_len > (1u << 16)) throw ValidationError("checkpoint: implausible name length");
    std::string name(name_len, '\0');
    std::uint32_t rank = 0;
    if (!is.read(name.data(), name_len) || !detail::get_u32(is, rank) || rank == 0 || rank > 8) {
      throw ValidationError("checkpoint: corrupt record header");
    }
    Dims dims(rank);
    for (auto& d : dims) {
      std::uint32_t v = 0;
      if (!detail::get_u32(is, v) || v == 0 || v > (1u << 24)) throw ValidationError("checkpoint: corrupt dims for " + name);
      d = static_cast<int>(v);
    }
    Tensor t(dims);
    for (auto& v : t.values()) {
      std::uint32_t bits = 0;
      if (!detail::get_u32(is, bits)) throw ValidationError("checkpoint: truncated payload for " + name);
      v = std::bit_cast<float>(bits);
    }
    if (!params.emplace(std::move(name), std::move(t)).second) throw ValidationError("checkpoint: duplicate record");
  }
  return params;
}

inline void save_checkpoint(const std::string& path, const ParamMap& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  write_checkpoint(os, params);
}

inline ParamMap load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint: " + path);
  return read_checkpoint(is);
}

inline std::string checkpoint_bytes(const ParamMap& params) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, params);
  return os.str();
}

/// FNV-1a over the serialized checkpoint.
inline std::uint64_t params_hash(const ParamMap& params) { return fnv1a(checkpoint_bytes(params)); }

}  // namespace lada
