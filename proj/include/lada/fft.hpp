#pragma once

#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <vector>

#include "lada/tensor.hpp"

namespace lada::fft {

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

/// exp(-2πik/n) for k < n/2, cached per thread and size.
template <class T>
const std::vector<std::complex<T>>& twiddles(int n) {
  thread_local std::map<int, std::vector<std::complex<T>>> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<std::complex<T>> tw(static_cast<std::size_t>(n / 2));
  for (int k = 0; k < n / 2; ++k) {
    const double ang = -2.0 * std::numbers::pi * k / n;
    tw[k] = {static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang))};
  }
  return cache.emplace(n, std::move(tw)).first->second;
}

/// In-place iterative radix-2 transform; `inverse` uses the +i exponent and
/// does NOT divide by n.
template <class T>
void transform(std::complex<T>* a, int n, bool inverse, int stride = 1) {
  const auto& tw = twiddles<T>(n);
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i * stride], a[j * stride]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const int half = len / 2;
    const int step = n / len;
    for (int k = 0; k < half; ++k) {
      const std::complex<T> w = inverse ? std::conj(tw[k * step]) : tw[k * step];
      for (int i = 0; i < n; i += len) {
        std::complex<T>& u = a[(i + k) * stride];
        std::complex<T>& v = a[(i + k + half) * stride];
        const std::complex<T> t(v.real() * w.real() - v.imag() * w.imag(), v.real() * w.imag() + v.imag() * w.real());
        v = u - t;
        u = u + t;
      }
    }
  }
}

/// 2-D transform of an h×w row-major complex grid (unnormalized both ways).
template <class T>
void transform_2d(std::complex<T>* a, int h, int w, bool inverse) {
  if (!is_power_of_two(h) || !is_power_of_two(w)) {
    throw ValidationError("fft extents must be powers of two, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  for (int y = 0; y < h; ++y) transform(a + y * w, w, inverse);
  for (int x = 0; x < w; ++x) transform(a + x, h, inverse, w);
}

/// Frequency indices k in [0, n) with min(k, n - k) <= modes, ascending.
inline std::vector<int> retained_indices(int n, int modes) {
  std::vector<int> idx;
  for (int k = 0; k < n; ++k) {
    if (std::min(k, n - k) <= modes) idx.push_back(k);
  }
  return idx;
}

}  // namespace lada::fft
