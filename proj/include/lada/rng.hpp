#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "lada/tensor.hpp"

namespace lada {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Counter-based split: a named sub-stream, optionally indexed, of a parent seed.
/// Streams never depend on how many numbers a sibling stream consumed.
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(parent ^ fnv1a(stream)) + splitmix64(index + 0x632BE59BD9B4E019ull));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  Rng split(std::string_view stream, std::uint64_t index = 0) { return Rng(derive_seed(engine_(), stream, index)); }

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

  /// Inclusive integer range.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  double normal() { return normal_(engine_); }

  template <class T>
  BasicTensor<T> normal_tensor(Dims dims, double stddev = 1.0) {
    BasicTensor<T> t(std::move(dims));
    for (auto& v : t.values()) v = static_cast<T>(normal() * stddev);
    return t;
  }

  template <class T>
  BasicTensor<T> uniform_tensor(Dims dims, double lo, double hi) {
    BasicTensor<T> t(std::move(dims));
    for (auto& v : t.values()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace lada
