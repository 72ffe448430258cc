#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "lada/image.hpp"

// Lithography forward model used as the labeling oracle: a weighted sum of
// squared mask/kernel convolutions (aerial image) followed by a constant
// resist threshold. Toroidal boundary. Never differentiated.
namespace lada::litho {

/// Resist threshold found by calibrate_threshold() on the default kernels and
/// default probe squares. Frozen here so the default oracle is a constant.
inline constexpr double kDefaultTheta = 0.16;

struct KernelConfig {
  std::vector<double> sigmas{1.5, 3.0, 6.0};
  std::vector<double> weights{0.6, 0.3, 0.1};
  double theta = kDefaultTheta;

  friend bool operator==(const KernelConfig&, const KernelConfig&) = default;
};

/// One isotropic Gaussian kernel on a square (2r+1)² support. The 2-D taps
/// are the outer product of the normalized 1-D profile.
struct Kernel {
  double sigma = 0;
  int radius = 0;
  std::vector<double> profile;  // 2r+1, sums to 1
  std::vector<double> taps;     // (2r+1)², row-major, sums to 1

  int extent() const noexcept { return 2 * radius + 1; }
  double tap(int dy, int dx) const { return taps[static_cast<std::size_t>(dy + radius) * extent() + dx + radius]; }
};

struct KernelSet {
  std::vector<Kernel> kernels;
  std::vector<double> weights;
  double theta = kDefaultTheta;

  int size() const noexcept { return static_cast<int>(kernels.size()); }
};

struct AerialImage {
  int height = 0, width = 0;
  std::vector<double> values;
  double operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

inline Kernel gaussian_kernel(double sigma) {
  Kernel k;
  k.sigma = sigma;
  k.radius = static_cast<int>(std::ceil(4.0 * sigma));
  const int n = k.extent();
  k.profile.resize(n);
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const double d = i - k.radius;
    k.profile[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += k.profile[i];
  }
  for (auto& v : k.profile) v /= total;
  // Mirror to make the profile exactly symmetric after rounding.
  for (int i = 0; i < k.radius; ++i) k.profile[n - 1 - i] = k.profile[i];
  k.taps.resize(static_cast<std::size_t>(n) * n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) k.taps[static_cast<std::size_t>(y) * n + x] = k.profile[y] * k.profile[x];
  }
  return k;
}

inline KernelSet build_kernels(const KernelConfig& cfg) {
  if (cfg.sigmas.empty() || cfg.sigmas.size() != cfg.weights.size()) {
    throw ValidationError("kernel config: sigmas and weights must be non-empty and equal length");
  }
  for (std::size_t i = 0; i < cfg.sigmas.size(); ++i) {
    if (!(cfg.sigmas[i] > 0)) throw ValidationError("kernel config: sigma must be positive");
    if (!(cfg.weights[i] > 0)) throw ValidationError("kernel config: weight must be positive");
    if (i > 0 && !(cfg.sigmas[i] > cfg.sigmas[i - 1])) throw ValidationError("kernel config: sigmas must ascend");
  }
  if (!(cfg.theta > 0 && cfg.theta < 1)) throw ValidationError("kernel config: theta must lie in (0, 1)");
  KernelSet ks;
  double wsum = 0;
  for (double w : cfg.weights) wsum += w;
  for (std::size_t i = 0; i < cfg.sigmas.size(); ++i) {
    ks.kernels.push_back(gaussian_kernel(cfg.sigmas[i]));
    ks.weights.push_back(cfg.weights[i] / wsum);
  }
  ks.theta = cfg.theta;
  return ks;
}

inline KernelConfig kernel_config(const KernelSet& ks) {
  KernelConfig cfg;
  cfg.sigmas.clear();
  for (const auto& k : ks.kernels) cfg.sigmas.push_back(k.sigma);
  cfg.weights = ks.weights;
  cfg.theta = ks.theta;
  return cfg;
}

namespace detail {

/// Toroidal separable convolution of a binary mask with one kernel. Each
/// output is a fixed-order sum of non-negative terms, so the result is exactly
/// shift-equivariant and monotone in the mask.
inline std::vector<double> blur(const MaskImage& mask, const Kernel& k) {
  const int h = mask.height(), w = mask.width(), r = k.radius, n = k.extent();
  std::vector<double> rows(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int t = 0; t < n; ++t) {
        const int xx = ((x + t - r) % w + w) % w;
        if (mask(y, xx)) acc += k.profile[t];
      }
      rows[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  std::vector<double> out(rows.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int t = 0; t < n; ++t) {
        const int yy = ((y + t - r) % h + h) % h;
        acc += k.profile[t] * rows[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = std::min(acc, 1.0);
    }
  }
  return out;
}

}  // namespace detail

/// I = Σ_k w_k · (mask ⊛ h_k)².
inline AerialImage simulate_aerial(const MaskImage& mask, const KernelSet& ks) {
  AerialImage img{mask.height(), mask.width(), std::vector<double>(mask.size(), 0.0)};
  for (int k = 0; k < ks.size(); ++k) {
    const auto field = detail::blur(mask, ks.kernels[k]);
    for (std::size_t i = 0; i < field.size(); ++i) img.values[i] += ks.weights[k] * field[i] * field[i];
  }
  for (auto& v : img.values) v = std::clamp(v, 0.0, 1.0);
  return img;
}

/// Inclusive threshold: a pixel prints when I ≥ θ.
inline ResistImage apply_resist(const AerialImage& aerial, double theta) {
  ResistImage out(aerial.height, aerial.width);
  for (int y = 0; y < aerial.height; ++y) {
    for (int x = 0; x < aerial.width; ++x) out.set(y, x, aerial(y, x) >= theta);
  }
  return out;
}

inline ResistImage apply_resist(const AerialImage& aerial, const KernelSet& ks) { return apply_resist(aerial, ks.theta); }

/// The labeling oracle.
inline ResistImage simulate(const MaskImage& mask, const KernelSet& ks) {
  return apply_resist(simulate_aerial(mask, ks), ks);
}

/// Projects a real-valued raster onto the binary mask domain: 1 where raw ≥ 0.
inline MaskImage legalize(std::span<const float> raw, int h = kCanvas, int w = kCanvas) {
  if (raw.size() != static_cast<std::size_t>(h) * w) throw ValidationError("legalize: raster size mismatch");
  MaskImage m(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) m.set(y, x, raw[static_cast<std::size_t>(y) * w + x] >= 0.0f);
  }
  return m;
}

inline MaskImage legalize(const Tensor& raw) {
  const Dims& d = raw.dims();
  const int h = d[d.size() - 2], w = d[d.size() - 1];
  return legalize(raw.span(), h, w);
}

inline MaskImage centered_square(int side, int canvas = kCanvas) {
  MaskImage m(canvas, canvas);
  const int lo = (canvas - side) / 2;
  for (int y = lo; y < lo + side; ++y) {
    for (int x = lo; x < lo + side; ++x) m.set(y, x, true);
  }
  return m;
}

inline std::vector<MaskImage> default_probes(int canvas = kCanvas) {
  std::vector<MaskImage> probes;
  for (int side : {8, 12, 16, 24}) probes.push_back(centered_square(side, canvas));
  return probes;
}

/// θ on the grid {0.01, …, 0.99} minimizing Σ |printed area − mask area| over
/// the probes; ties go to the smaller θ. The kernels' own θ is ignored.
inline double calibrate_threshold(const KernelSet& ks, const std::vector<MaskImage>& probes) {
  if (probes.empty()) throw ValidationError("calibrate_threshold: no probes");
  std::vector<AerialImage> aerials;
  for (const auto& p : probes) aerials.push_back(simulate_aerial(p, ks));
  double best_theta = 0.01;
  long best_cost = -1;
  for (int i = 1; i <= 99; ++i) {
    const double theta = i / 100.0;
    long cost = 0;
    for (std::size_t p = 0; p < probes.size(); ++p) {
      const long printed = static_cast<long>(apply_resist(aerials[p], theta).count());
      cost += std::abs(printed - static_cast<long>(probes[p].count()));
    }
    if (best_cost < 0 || cost < best_cost) {
      best_cost = cost;
      best_theta = theta;
    }
  }
  return best_theta;
}

// ---------------------------------------------------------------- JSON {K, sigmas, weights, theta}

inline nlohmann::json to_json(const KernelConfig& cfg) {
  return nlohmann::json{{"K", cfg.sigmas.size()}, {"sigmas", cfg.sigmas}, {"weights", cfg.weights}, {"theta", cfg.theta}};
}

inline KernelConfig kernel_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("kernel set JSON must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key != "K" && key != "sigmas" && key != "weights" && key != "theta") {
      throw ValidationError("kernel set JSON: unknown key '" + key + "'");
    }
  }
  KernelConfig cfg;
  try {
    if (j.contains("sigmas")) cfg.sigmas = j.at("sigmas").get<std::vector<double>>();
    if (j.contains("weights")) cfg.weights = j.at("weights").get<std::vector<double>>();
    if (j.contains("theta")) cfg.theta = j.at("theta").get<double>();
    if (j.contains("K") && j.at("K").get<std::size_t>() != cfg.sigmas.size()) {
      throw ValidationError("kernel set JSON: K does not match the number of sigmas");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("kernel set JSON: ") + e.what());
  }
  build_kernels(cfg);  // validates
  return cfg;
}

}  // namespace lada::litho
