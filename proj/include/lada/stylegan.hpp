#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "lada/image.hpp"
#include "lada/litho.hpp"
#include "lada/ops.hpp"
#include "lada/optim.hpp"
#include "lada/parallel.hpp"
#include "lada/params.hpp"
#include "lada/rng.hpp"

// Miniature style-based generator. A mapping MLP turns z into w; four
// synthesis blocks grow a learned 4×4 constant to 64×64, each modulated by a
// per-channel scale/shift from w and perturbed by its own noise map.
namespace lada::style {

inline constexpr int kLatent = 64;
inline constexpr int kBlocks = 4;
inline constexpr std::array<int, kBlocks> kNoiseSizes = {8, 16, 32, 64};
inline constexpr double kNoiseGainInit = 0.1;

struct GeneratorArch {
  int const_channels = 64;
  std::array<int, kBlocks> channels = {64, 32, 16, 8};

  friend bool operator==(const GeneratorArch&, const GeneratorArch&) = default;
};

struct DiscriminatorArch {
  std::array<int, 4> channels = {16, 32, 64, 64};

  friend bool operator==(const DiscriminatorArch&, const DiscriminatorArch&) = default;
};

struct GeneratorInit {
  bool zero_mapping = false;
  bool zero_noise_gain = false;
};

struct Generator {
  GeneratorArch arch;
  ParamMap params;
};

struct Discriminator {
  DiscriminatorArch arch;
  ParamMap params;
};

// ---------------------------------------------------------------- noise

/// One single-channel map per synthesis block.
struct NoiseBank {
  std::array<Tensor, kBlocks> maps;

  static NoiseBank zeros() {
    NoiseBank nb;
    for (int b = 0; b < kBlocks; ++b) nb.maps[b] = Tensor(Dims{1, kNoiseSizes[b], kNoiseSizes[b]});
    return nb;
  }

  static NoiseBank normal(Rng& rng) {
    NoiseBank nb;
    for (int b = 0; b < kBlocks; ++b) nb.maps[b] = rng.normal_tensor<float>(Dims{1, kNoiseSizes[b], kNoiseSizes[b]});
    return nb;
  }

  /// Total element count |N|.
  static constexpr std::size_t total_size() {
    std::size_t n = 0;
    for (int s : kNoiseSizes) n += static_cast<std::size_t>(s) * s;
    return n;
  }

  friend bool operator==(const NoiseBank&, const NoiseBank&) = default;
};

// ---------------------------------------------------------------- parameters

namespace detail {

inline std::string block(int b) { return "block" + std::to_string(b); }

/// He-uniform for leaky activations.
inline Tensor he_uniform(Rng& rng, Dims dims, int fan_in) {
  const double bound = std::sqrt(6.0 / ((1.0 + ops::kLeakySlope * ops::kLeakySlope) * fan_in));
  return rng.uniform_tensor<float>(std::move(dims), -bound, bound);
}

inline ParamMap init_from_shapes(const std::map<std::string, Dims>& shapes, std::uint64_t seed) {
  ParamMap out;
  for (const auto& [name, dims] : shapes) {
    Rng rng(derive_seed(seed, name));
    Tensor t(dims);
    if (name.ends_with(".weight")) {
      const int fan_in = static_cast<int>(t.size() / static_cast<std::size_t>(dims[0]));
      t = he_uniform(rng, dims, fan_in);
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

inline void check_shapes(const std::map<std::string, Dims>& shapes, const ParamMap& params, const char* what) {
  if (shapes.size() != params.size()) throw ValidationError(std::string(what) + ": parameter count mismatch");
  for (const auto& [name, dims] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError(std::string(what) + ": missing parameter '" + name + "'");
    if (it->second.dims() != dims) {
      throw ValidationError(std::string(what) + ": parameter '" + name + "' has shape " +
                            dims_to_string(it->second.dims()) + ", expected " + dims_to_string(dims));
    }
  }
}

}  // namespace detail

inline std::map<std::string, Dims> parameter_shapes(const GeneratorArch& a) {
  std::map<std::string, Dims> s;
  for (int l = 0; l < 2; ++l) {
    s["map." + std::to_string(l) + ".weight"] = {kLatent, kLatent};
    s["map." + std::to_string(l) + ".bias"] = {kLatent};
  }
  s["const"] = {a.const_channels, 4, 4};
  int in = a.const_channels;
  for (int b = 0; b < kBlocks; ++b) {
    const auto p = detail::block(b);
    const int c = a.channels[b];
    s[p + ".conv.weight"] = {c, in, 3, 3};
    s[p + ".conv.bias"] = {c};
    s[p + ".style_scale.weight"] = {c, kLatent};
    s[p + ".style_scale.bias"] = {c};
    s[p + ".style_shift.weight"] = {c, kLatent};
    s[p + ".style_shift.bias"] = {c};
    s[p + ".noise_gain"] = {c};
    in = c;
  }
  s["out.weight"] = {1, in, 3, 3};
  s["out.bias"] = {1};
  return s;
}

inline std::map<std::string, Dims> parameter_shapes(const DiscriminatorArch& a) {
  std::map<std::string, Dims> s;
  int in = 1;
  for (int l = 0; l < 4; ++l) {
    const std::string p = "d" + std::to_string(l);
    s[p + ".weight"] = {a.channels[l], in, 3, 3};
    s[p + ".bias"] = {a.channels[l]};
    in = a.channels[l];
  }
  s["head.weight"] = {1, in};
  s["head.bias"] = {1};
  return s;
}

inline void validate(const GeneratorArch& a) {
  if (a.const_channels < 1) throw ValidationError("generator: channel counts must be positive");
  for (int c : a.channels) {
    if (c < 1) throw ValidationError("generator: channel counts must be positive");
  }
}

inline void validate(const DiscriminatorArch& a) {
  for (int c : a.channels) {
    if (c < 1) throw ValidationError("discriminator: channel counts must be positive");
  }
}

inline void check_params(const Generator& g) { detail::check_shapes(parameter_shapes(g.arch), g.params, "generator"); }
inline void check_params(const Discriminator& d) {
  detail::check_shapes(parameter_shapes(d.arch), d.params, "discriminator");
}

/// He-uniform weights, zero biases, N(0, 1) constant, noise gains 0.1.
inline Generator init_generator(const GeneratorArch& arch, std::uint64_t seed, GeneratorInit opt = {}) {
  validate(arch);
  Generator g{arch, detail::init_from_shapes(parameter_shapes(arch), seed)};
  g.params.at("const") = Rng(derive_seed(seed, "const")).normal_tensor<float>(g.params.at("const").dims());
  for (int b = 0; b < kBlocks; ++b) {
    g.params.at(detail::block(b) + ".noise_gain").fill(opt.zero_noise_gain ? 0.0f : static_cast<float>(kNoiseGainInit));
  }
  if (opt.zero_mapping) {
    for (auto& [name, t] : g.params) {
      if (name.starts_with("map.")) t.fill(0.0f);
    }
  }
  return g;
}

inline Discriminator init_discriminator(const DiscriminatorArch& arch, std::uint64_t seed) {
  validate(arch);
  return {arch, detail::init_from_shapes(parameter_shapes(arch), seed)};
}

// ---------------------------------------------------------------- forward passes

/// w = z + leaky(W1·leaky(W0·z + b0) + b1).
template <class T>
Var<T> map_latent(const Bound<T>& p, Var<T> z) {
  using namespace ops;
  if (z.value().size() != static_cast<std::size_t>(kLatent)) throw ValidationError("map_latent: z must have 64 entries");
  auto h = leaky_relu(dense(z, p["map.0.weight"], p["map.0.bias"]));
  h = leaky_relu(dense(h, p["map.1.weight"], p["map.1.bias"]));
  return add(z, h);
}

/// Raw image 1×64×64 in (−1, 1). Both z and the noise maps may be tape leaves.
template <class T>
Var<T> synthesize(const Bound<T>& p, Var<T> z, const std::array<Var<T>, kBlocks>& noise) {
  using namespace ops;
  auto w = map_latent(p, z);
  auto x = p["const"];
  for (int b = 0; b < kBlocks; ++b) {
    const auto name = detail::block(b);
    if (noise[b].value().size() != static_cast<std::size_t>(kNoiseSizes[b]) * kNoiseSizes[b]) {
      throw ValidationError("synthesize: noise map " + std::to_string(b) + " has the wrong size");
    }
    x = add_channel_bias(conv2d(upsample2x(x), p[name + ".conv.weight"]), p[name + ".conv.bias"]);
    auto s = add_scalar(dense(w, p[name + ".style_scale.weight"], p[name + ".style_scale.bias"]), T(1));
    auto t = dense(w, p[name + ".style_shift.weight"], p[name + ".style_shift.bias"]);
    x = channel_affine(x, s, t);
    x = add_scaled_map(x, p[name + ".noise_gain"], noise[b]);
    x = leaky_relu(x);
  }
  return ops::tanh(add_channel_bias(conv2d(x, p["out.weight"]), p["out.bias"]));
}

/// Scalar logit; positive means "real".
template <class T>
Var<T> discriminate(const Bound<T>& p, Var<T> x) {
  using namespace ops;
  if (x.dims() != Dims{1, kCanvas, kCanvas}) throw ValidationError("discriminate: input must be 1×64×64");
  for (int l = 0; l < 4; ++l) {
    const std::string name = "d" + std::to_string(l);
    x = leaky_relu(add_channel_bias(conv2d(x, p[name + ".weight"], 2), p[name + ".bias"]));
  }
  return dense(global_avg_pool(x), p["head.weight"], p["head.bias"]);
}

template <class T>
std::array<Var<T>, kBlocks> noise_constants(Tape<T>& tape, const NoiseBank& nb) {
  std::array<Var<T>, kBlocks> out;
  for (int b = 0; b < kBlocks; ++b) out[b] = tape.constant(nb.maps[b].template cast<T>());
  return out;
}

/// Value-only synthesis.
inline Tensor generate(const Generator& g, const Tensor& z, const NoiseBank& noise) {
  Tape<float> tape;
  Bound<float> p(tape, g.params, false);
  return synthesize(p, tape.constant(z), noise_constants(tape, noise)).value();
}

inline Tensor latent_of(const Generator& g, const Tensor& z) {
  Tape<float> tape;
  Bound<float> p(tape, g.params, false);
  return map_latent(p, tape.constant(z)).value();
}

inline double discriminator_logit(const Discriminator& d, const Tensor& x) {
  Tape<float> tape;
  Bound<float> p(tape, d.params, false);
  return discriminate(p, tape.constant(x)).value()[0];
}

// ---------------------------------------------------------------- sampling

enum class NoiseMode { zero, random };

struct Draw {
  Tensor z;  // 64
  NoiseBank noise;
  Tensor raw;  // 1×64×64
  MaskImage mask;
};

inline Tensor sample_latent(Rng& rng) { return rng.normal_tensor<float>(Dims{kLatent}); }

/// z ~ N(0, 1); noise zero or N(0, 1); mask = legalize(raw).
inline Draw sample_mask(const Generator& g, std::uint64_t seed, NoiseMode mode) {
  Rng rng(seed);
  Draw d;
  d.z = sample_latent(rng);
  d.noise = mode == NoiseMode::zero ? NoiseBank::zeros() : NoiseBank::normal(rng);
  d.raw = generate(g, d.z, d.noise);
  d.mask = litho::legalize(d.raw);
  return d;
}

// ---------------------------------------------------------------- adversarial training

struct GanConfig {
  int steps = 2000;
  double lr = 2e-4;
  int batch = 16;
  double r1_gamma = 1.0;
  int r1_interval = 4;
  double beta1 = 0.0;
  double beta2 = 0.99;

  friend bool operator==(const GanConfig&, const GanConfig&) = default;
};

struct GanHistory {
  std::vector<double> d_loss, g_loss;
  std::vector<double> d_real_acc, d_fake_acc;  // share of reals scored > 0, fakes scored < 0
  std::vector<double> r1;                      // mean ‖∇ₓD‖² on reals; NaN on steps without the penalty
};

struct GanResult {
  Generator g;
  Discriminator d;
  GanHistory history;
};

inline constexpr std::size_t kMinGanDataset = 64;

namespace detail {

/// Sums per-pass gradient maps in index order.
inline void reduce_grads(const std::vector<ParamMap>& parts, ParamMap& out) {
  out.clear();
  for (const auto& part : parts) {
    for (const auto& [name, g] : part) {
      auto [it, inserted] = out.try_emplace(name, Tensor(g.dims()));
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
  }
}

inline void add_into(ParamMap& acc, const ParamMap& extra, double w) {
  for (const auto& [name, g] : extra) {
    auto [it, inserted] = acc.try_emplace(name, Tensor(g.dims()));
    for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += static_cast<float>(w * g[i]);
  }
}

/// ∇θ D at x, scaled by `w`.
inline ParamMap d_param_grad(const Discriminator& d, const Tensor& x, double w) {
  Tape<float> tape;
  Bound<float> p(tape, d.params, true);
  tape.backward(ops::scale(discriminate(p, tape.constant(x)), static_cast<float>(w)));
  return p.grads();
}

struct R1Pass {
  double grad_sq = 0;
  ParamMap grads;
};

/// Gradient w.r.t. θ of (γ/2)‖∇ₓD(x)‖², scaled by `w`. With g = ∇ₓD(x) this
/// is γ·(∂g/∂θ)ᵀg, a mixed second derivative, taken here as the central
/// difference of ∇θD along g: γ·[∇θD(x + εg) − ∇θD(x − εg)] / 2ε.
/// ε is chosen so the probe moves x by 0.01 in L2; larger probes cross kinks.
inline R1Pass r1_gradient(const Discriminator& d, const Tensor& x, double gamma, double w) {
  R1Pass out;
  Tensor g;
  {
    Tape<float> tape;
    Bound<float> p(tape, d.params, false);
    auto xv = tape.leaf(x);
    tape.backward(discriminate(p, xv));
    g = tape.grad(xv);
  }
  for (float v : g.values()) out.grad_sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(out.grad_sq);
  if (norm < 1e-12 || gamma == 0) return out;
  const double eps = 0.01 / norm;
  Tensor xp = x, xm = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] += static_cast<float>(eps * g[i]);
    xm[i] -= static_cast<float>(eps * g[i]);
  }
  const double c = w * gamma / (2.0 * eps);
  out.grads = d_param_grad(d, xp, c);
  add_into(out.grads, d_param_grad(d, xm, -c), 1.0);
  return out;
}

}  // namespace detail

/// Alternating single-step updates with the non-saturating logistic loss:
/// D minimizes softplus(D(fake)) + softplus(−D(real)); G minimizes
/// softplus(−D(G(z, noise))). Every r1_interval-th D step adds the R1 penalty
/// on reals, multiplied by the interval (lazy regularization). Adam on both
/// nets with fresh state.
inline GanResult gan_train(const Generator& g0, const Discriminator& d0, const std::vector<MaskImage>& data,
                           const GanConfig& cfg, std::uint64_t seed) {
  if (data.size() < kMinGanDataset) {
    throw ValidationError("gan_train: need at least " + std::to_string(kMinGanDataset) + " masks, got " +
                          std::to_string(data.size()));
  }
  if (cfg.steps < 0 || cfg.batch < 1 || !(cfg.lr > 0) || cfg.r1_gamma < 0 || cfg.r1_interval < 1) {
    throw ValidationError("gan_train: invalid configuration");
  }
  check_params(g0);
  check_params(d0);
  enable_flush_to_zero();
  GanResult res{g0, d0, {}};
  const AdamConfig adam_cfg{cfg.lr, cfg.beta1, cfg.beta2, 1e-8};
  Adam adam_g(adam_cfg), adam_d(adam_cfg);
  const auto b = static_cast<std::size_t>(cfg.batch);
  const double inv_b = 1.0 / static_cast<double>(b);

  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(seed, "gan_step", static_cast<std::uint64_t>(step)));
    std::vector<Tensor> reals(b), zs(b);
    std::vector<NoiseBank> noises(b);
    for (std::size_t k = 0; k < b; ++k) {
      reals[k] = encode_mask(data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(data.size()) - 1))]);
      zs[k] = sample_latent(rng);
      noises[k] = NoiseBank::normal(rng);
    }

    // Fakes stay on their own tapes so the generator step can reuse them.
    struct FakePass {
      std::unique_ptr<Tape<float>> tape;
      std::unique_ptr<Bound<float>> gp;
      Var<float> image;
    };
    std::vector<FakePass> fakes(b);
    parallel_for(b, [&](std::size_t k) {
      auto& f = fakes[k];
      f.tape = std::make_unique<Tape<float>>();
      f.gp = std::make_unique<Bound<float>>(*f.tape, res.g.params, true);
      f.image = synthesize(*f.gp, f.tape->constant(zs[k]), noise_constants(*f.tape, noises[k]));
    });

    // Discriminator step.
    const bool lazy_r1 = cfg.r1_gamma > 0 && step % cfg.r1_interval == 0;
    std::vector<ParamMap> d_parts(2 * b + (lazy_r1 ? b : 0));
    std::vector<double> logits(2 * b), r1_sq(b, 0.0);
    parallel_for(d_parts.size(), [&](std::size_t k) {
      if (k < 2 * b) {
        const bool real = k < b;
        const Tensor& x = real ? reals[k] : fakes[k - b].image.value();
        Tape<float> tape;
        Bound<float> p(tape, res.d.params, true);
        auto logit = discriminate(p, tape.constant(x));
        logits[k] = logit.value()[0];
        auto loss = ops::softplus(real ? ops::scale(logit, -1.0f) : logit);
        tape.backward(ops::scale(loss, static_cast<float>(inv_b)));
        d_parts[k] = p.grads();
      } else {
        auto r1 = detail::r1_gradient(res.d, reals[k - 2 * b], cfg.r1_gamma, cfg.r1_interval * inv_b);
        r1_sq[k - 2 * b] = r1.grad_sq;
        d_parts[k] = std::move(r1.grads);
      }
    });
    double d_loss = 0, real_acc = 0, fake_acc = 0;
    for (std::size_t k = 0; k < b; ++k) {
      d_loss += std::log1p(std::exp(-logits[k])) + std::log1p(std::exp(logits[b + k]));
      real_acc += logits[k] > 0;
      fake_acc += logits[b + k] < 0;
    }
    ParamMap d_grads;
    detail::reduce_grads(d_parts, d_grads);
    adam_d.step(res.d.params, d_grads);

    // Generator step against the updated discriminator.
    std::vector<ParamMap> g_parts(b);
    std::vector<double> g_losses(b);
    parallel_for(b, [&](std::size_t k) {
      auto& f = fakes[k];
      Bound<float> dp(*f.tape, res.d.params, false);
      auto loss = ops::softplus(ops::scale(discriminate(dp, f.image), -1.0f));
      g_losses[k] = loss.value()[0];
      f.tape->backward(ops::scale(loss, static_cast<float>(inv_b)));
      g_parts[k] = f.gp->grads();
      f.gp.reset();
      f.tape.reset();
    });
    ParamMap g_grads;
    detail::reduce_grads(g_parts, g_grads);
    adam_g.step(res.g.params, g_grads);

    double g_loss = 0, r1_mean = 0;
    for (std::size_t k = 0; k < b; ++k) {
      g_loss += g_losses[k];
      r1_mean += r1_sq[k];
    }
    auto& h = res.history;
    h.d_loss.push_back(d_loss * inv_b);
    h.g_loss.push_back(g_loss * inv_b);
    h.d_real_acc.push_back(real_acc * inv_b);
    h.d_fake_acc.push_back(fake_acc * inv_b);
    h.r1.push_back(lazy_r1 ? r1_mean * inv_b : std::nan(""));
  }
  if (!params_finite(res.g.params) || !params_finite(res.d.params)) {
    throw std::runtime_error("gan_train: parameters became non-finite");
  }
  return res;
}

/// D accuracies on fresh samples: reals drawn from `data`, fakes from G with
/// random noise.
struct Accuracy {
  double real = 0, fake = 0;
};

inline Accuracy discriminator_accuracy(const Generator& g, const Discriminator& d, const std::vector<MaskImage>& data,
                                       int count, std::uint64_t seed) {
  if (count < 1 || data.empty()) throw ValidationError("discriminator_accuracy: need data and count >= 1");
  std::vector<int> real_hit(count), fake_hit(count);
  parallel_for(static_cast<std::size_t>(count), [&](std::size_t k) {
    Rng rng(derive_seed(seed, "accuracy", k));
    const auto& m = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(data.size()) - 1))];
    real_hit[k] = discriminator_logit(d, encode_mask(m)) > 0;
    const Tensor z = sample_latent(rng);
    fake_hit[k] = discriminator_logit(d, generate(g, z, NoiseBank::normal(rng))) < 0;
  });
  Accuracy acc;
  for (int k = 0; k < count; ++k) {
    acc.real += real_hit[k];
    acc.fake += fake_hit[k];
  }
  acc.real /= count;
  acc.fake /= count;
  return acc;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const GeneratorArch& a) {
  return {{"const_channels", a.const_channels}, {"channels", a.channels}};
}

inline nlohmann::json to_json(const DiscriminatorArch& a) { return {{"channels", a.channels}}; }

}  // namespace lada::style
