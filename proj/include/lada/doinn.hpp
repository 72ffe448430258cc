#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "lada/fft.hpp"
#include "lada/image.hpp"
#include "lada/ops.hpp"
#include "lada/optim.hpp"
#include "lada/parallel.hpp"
#include "lada/params.hpp"
#include "lada/rng.hpp"

// DOINN-lite surrogate: a spectral global path and a strided convolutional
// local path meet in a bottleneck at quarter resolution; a nearest-upsample
// decoder reconstructs 2-channel resist logits. A loss-prediction head reads
// three mid-level taps.
namespace lada::doinn {

struct Architecture {
  int canvas = kCanvas;
  int gp_channels = 16;
  int modes = 8;
  int lp1 = 16, lp2 = 32;
  int fuse = 64;
  int ir1 = 32, ir2 = 16;
  int lpm_hidden = 32;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct InitOptions {
  bool zero_output_head = false;
  bool zero_lpm_head = false;
};

struct Model {
  Architecture arch;
  ParamMap params;
};

inline constexpr double kRankMargin = 0.1;
inline constexpr double kMixNoise = 0.02;

inline void validate(const Architecture& a) {
  if (a.canvas < 8 || !fft::is_power_of_two(a.canvas)) throw ValidationError("doinn: canvas must be a power of two >= 8");
  if (a.modes < 1 || a.modes > a.canvas / 2) throw ValidationError("doinn: modes out of range");
  for (int c : {a.gp_channels, a.lp1, a.lp2, a.fuse, a.ir1, a.ir2, a.lpm_hidden}) {
    if (c < 1) throw ValidationError("doinn: channel counts must be positive");
  }
}

/// Shape of every parameter, keyed by name.
inline std::map<std::string, Dims> parameter_shapes(const Architecture& a) {
  const int n = a.canvas;
  std::map<std::string, Dims> s;
  s["gp.0.mix"] = ops::spectral_mix_dims(a.gp_channels, 1, n, n, a.modes);
  s["gp.0.bias"] = {a.gp_channels};
  s["gp.1.mix"] = ops::spectral_mix_dims(a.gp_channels, a.gp_channels, n, n, a.modes);
  s["gp.1.bias"] = {a.gp_channels};
  s["lp.0.weight"] = {a.lp1, 1, 3, 3};
  s["lp.0.bias"] = {a.lp1};
  s["lp.1.weight"] = {a.lp2, a.lp1, 3, 3};
  s["lp.1.bias"] = {a.lp2};
  s["fuse.weight"] = {a.fuse, a.lp2 + a.gp_channels, 3, 3};
  s["fuse.bias"] = {a.fuse};
  s["ir.0.weight"] = {a.ir1, a.fuse, 3, 3};
  s["ir.0.bias"] = {a.ir1};
  s["ir.1.weight"] = {a.ir2, a.ir1, 3, 3};
  s["ir.1.bias"] = {a.ir2};
  s["head.weight"] = {2, a.ir2, 1, 1};
  s["head.bias"] = {2};
  const int tap_channels[3] = {a.lp2, a.gp_channels, a.fuse};
  for (int t = 0; t < 3; ++t) {
    const std::string p = "lpm.tap" + std::to_string(t);
    s[p + ".weight"] = {a.lpm_hidden, tap_channels[t]};
    s[p + ".bias"] = {a.lpm_hidden};
  }
  s["lpm.out.weight"] = {1, 3 * a.lpm_hidden};
  s["lpm.out.bias"] = {1};
  return s;
}

/// Rejects a parameter map whose names or shapes disagree with `arch`.
inline void check_params(const Architecture& arch, const ParamMap& params) {
  const auto shapes = parameter_shapes(arch);
  if (shapes.size() != params.size()) throw ValidationError("doinn: parameter count mismatch");
  for (const auto& [name, dims] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError("doinn: missing parameter '" + name + "'");
    if (it->second.dims() != dims) {
      throw ValidationError("doinn: parameter '" + name + "' has shape " + dims_to_string(it->second.dims()) +
                            ", expected " + dims_to_string(dims));
    }
  }
}

/// Uniform fan-in init for conv/dense weights, zero biases, spectral mixes
/// at a channel-tiled identity plus N(0, 0.02²) noise.
inline Model init_model(const Architecture& arch, std::uint64_t seed, InitOptions opt = {}) {
  validate(arch);
  Model m{arch, {}};
  for (const auto& [name, dims] : parameter_shapes(arch)) {
    Rng rng = Rng(derive_seed(seed, name));
    Tensor t(dims);
    if (name.ends_with(".mix")) {
      const int co = dims[0], ci = dims[1];
      const std::size_t plane = static_cast<std::size_t>(dims[2]) * dims[3] * 2;
      for (int o = 0; o < co; ++o) {
        for (int i = 0; i < ci; ++i) {
          float* p = t.data() + (static_cast<std::size_t>(o) * ci + i) * plane;
          const float diag = (o % ci == i) ? 1.0f : 0.0f;
          for (std::size_t f = 0; f < plane; ++f) p[f] = static_cast<float>(rng.normal() * kMixNoise) + (f % 2 == 0 ? diag : 0.0f);
        }
      }
    } else if (name.ends_with(".weight")) {
      const int fan_in = static_cast<int>(t.size() / static_cast<std::size_t>(dims[0]));
      t = fan_in_uniform(rng, dims, fan_in);
    }
    m.params.emplace(name, std::move(t));
  }
  if (opt.zero_output_head) {
    m.params.at("head.weight").fill(0.0f);
    m.params.at("head.bias").fill(0.0f);
  }
  if (opt.zero_lpm_head) {
    m.params.at("lpm.out.weight").fill(0.0f);
    m.params.at("lpm.out.bias").fill(0.0f);
  }
  return m;
}

template <class T>
struct Output {
  Var<T> logits;             // 2×H×W; channel 1 = foreground
  std::array<Var<T>, 3> taps;  // LP out, GP out, bottleneck
};

/// Input is 1×H×W in [−1, 1] (masks enter as 2M − 1).
template <class T>
Output<T> forward(const Bound<T>& p, const Architecture& a, Var<T> x) {
  using namespace ops;
  if (x.dims() != Dims{1, a.canvas, a.canvas}) {
    throw ValidationError("doinn: input must be " + dims_to_string(Dims{1, a.canvas, a.canvas}) + ", got " +
                          dims_to_string(x.dims()));
  }
  auto lp = relu(add_channel_bias(conv2d(x, p["lp.0.weight"], 2), p["lp.0.bias"]));
  lp = relu(add_channel_bias(conv2d(lp, p["lp.1.weight"], 2), p["lp.1.bias"]));

  auto gp = relu(add_channel_bias(spectral_conv(x, p["gp.0.mix"], a.modes), p["gp.0.bias"]));
  gp = relu(add_channel_bias(spectral_conv(gp, p["gp.1.mix"], a.modes), p["gp.1.bias"]));
  gp = avg_pool(gp, 4);

  auto bottleneck = relu(add_channel_bias(conv2d(concat(std::vector<Var<T>>{lp, gp}), p["fuse.weight"]), p["fuse.bias"]));

  auto y = relu(add_channel_bias(conv2d(upsample2x(bottleneck), p["ir.0.weight"]), p["ir.0.bias"]));
  y = relu(add_channel_bias(conv2d(upsample2x(y), p["ir.1.weight"]), p["ir.1.bias"]));
  auto logits = add_channel_bias(conv2d(y, p["head.weight"]), p["head.bias"]);
  return {logits, {lp, gp, bottleneck}};
}

/// Predicted loss l̂ (shape {1}). With `detach_taps` the head trains without
/// pushing gradient into the backbone.
template <class T>
Var<T> lpm_predict(const Bound<T>& p, const std::array<Var<T>, 3>& taps, bool detach_taps = false) {
  using namespace ops;
  std::vector<Var<T>> hidden;
  for (int t = 0; t < 3; ++t) {
    const std::string name = "lpm.tap" + std::to_string(t);
    auto tap = detach_taps ? detach(taps[t]) : taps[t];
    hidden.push_back(relu(dense(global_avg_pool(tap), p[name + ".weight"], p[name + ".bias"])));
  }
  return dense(concat(hidden), p["lpm.out.weight"], p["lpm.out.bias"]);
}

template <class T>
Var<T> seg_loss(Var<T> logits, const BasicTensor<T>& target) {
  return ops::softmax_ce(logits, target);
}

/// Per-pixel argmax; ties go to background.
inline ResistImage predict_resist(const Tensor& logits) {
  const Dims& d = logits.dims();
  if (d.size() != 3 || d[0] != 2) throw ValidationError("predict_resist: logits must be 2×H×W");
  const std::size_t plane = static_cast<std::size_t>(d[1]) * d[2];
  ResistImage r(d[1], d[2]);
  for (int y = 0; y < d[1]; ++y) {
    for (int x = 0; x < d[2]; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * d[2] + x;
      r.set(y, x, logits[plane + i] > logits[i]);
    }
  }
  return r;
}

/// Logits and l̂ for one input without recording gradients.
struct Inference {
  Tensor logits;
  double lpm = 0;
};

inline Inference infer(const Model& m, const Tensor& input) {
  Tape<float> tape;
  Bound<float> p(tape, m.params, false);
  auto out = forward(p, m.arch, tape.constant(input));
  auto l = lpm_predict(p, out.taps);
  return {out.logits.value(), l.value()[0]};
}

inline ResistImage predict(const Model& m, const MaskImage& mask) { return predict_resist(infer(m, encode_mask(mask)).logits); }

// ---------------------------------------------------------------- LPM ranking loss

struct RankLoss {
  double value = 0;
  std::vector<double> grad;  // d value / d l̂_i
  bool dropped_last = false;
};

/// Margin ranking over disjoint consecutive pairs (0,1), (2,3), …:
/// mean of max(0, −sign(l_i − l_j)·(l̂_i − l̂_j) + ξ). Equal true losses give
/// sign 0 and contribute ξ. An odd trailing element is dropped.
inline RankLoss lpm_train_loss(const std::vector<double>& predicted, const std::vector<double>& truth,
                               double margin = kRankMargin) {
  if (predicted.size() != truth.size()) throw ValidationError("lpm_train_loss: batch sizes differ");
  RankLoss r;
  r.grad.assign(predicted.size(), 0.0);
  r.dropped_last = predicted.size() % 2 == 1;
  const std::size_t pairs = predicted.size() / 2;
  if (pairs == 0) return r;
  for (std::size_t k = 0; k < pairs; ++k) {
    const std::size_t i = 2 * k, j = 2 * k + 1;
    const double s = (truth[i] > truth[j]) - (truth[i] < truth[j]);
    const double v = -s * (predicted[i] - predicted[j]) + margin;
    if (v > 0) {
      r.value += v;
      r.grad[i] -= s / static_cast<double>(pairs);
      r.grad[j] += s / static_cast<double>(pairs);
    }
  }
  r.value /= static_cast<double>(pairs);
  return r;
}

// ---------------------------------------------------------------- training

/// One labeled pair in network form.
struct Sample {
  Tensor input;   // 1×H×W, ±1
  Tensor target;  // H×W, {0, 1}
};

inline Sample make_sample(const MaskImage& mask, const ResistImage& resist) {
  return {encode_mask(mask), resist_target(resist)};
}

struct FinetuneConfig {
  int epochs = 8;
  double lr = 1e-3;
  int batch = 16;
  double lpm_weight = 1.0;

  friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

struct FinetuneResult {
  Model model;
  std::vector<double> epoch_loss;      // mean segmentation loss seen during each epoch
  std::vector<double> epoch_lpm_loss;  // mean ranking loss over batches
  std::vector<std::string> warnings;
};

namespace detail {

struct BatchStats {
  double seg = 0;
  double rank = 0;
  bool dropped = false;
};

/// Gradient of mean(seg) + w·rank over one mini-batch, reduced in sample order.
inline BatchStats batch_gradient(const Model& m, const std::vector<Sample>& data, const std::vector<std::size_t>& idx,
                                 double lpm_weight, ParamMap& grads) {
  const std::size_t b = idx.size();
  struct Pass {
    std::unique_ptr<Tape<float>> tape;
    std::unique_ptr<Bound<float>> bound;
    Var<float> seg, lhat;
    ParamMap grads;
  };
  std::vector<Pass> passes(b);
  parallel_for(b, [&](std::size_t k) {
    auto& ps = passes[k];
    ps.tape = std::make_unique<Tape<float>>();
    ps.bound = std::make_unique<Bound<float>>(*ps.tape, m.params, true);
    const Sample& s = data[idx[k]];
    auto out = forward(*ps.bound, m.arch, ps.tape->constant(s.input));
    ps.seg = seg_loss(out.logits, s.target);
    ps.lhat = lpm_predict(*ps.bound, out.taps, true);
  });
  std::vector<double> lhat(b), ltrue(b);
  BatchStats st;
  for (std::size_t k = 0; k < b; ++k) {
    lhat[k] = passes[k].lhat.value()[0];
    ltrue[k] = passes[k].seg.value()[0];
    st.seg += ltrue[k];
  }
  st.seg /= static_cast<double>(b);
  const auto rank = lpm_train_loss(lhat, ltrue);
  st.rank = rank.value;
  st.dropped = rank.dropped_last;
  parallel_for(b, [&](std::size_t k) {
    auto& ps = passes[k];
    using namespace ops;
    auto root = add(scale(ps.seg, static_cast<float>(1.0 / static_cast<double>(b))),
                    scale(ps.lhat, static_cast<float>(lpm_weight * rank.grad[k])));
    ps.tape->backward(root);
    ps.bound->accumulate_grads(ps.grads);
    ps.bound.reset();
    ps.tape.reset();
  });
  grads.clear();
  for (auto& ps : passes) {
    for (auto& [name, g] : ps.grads) {
      auto [it, inserted] = grads.try_emplace(name, Tensor(g.dims()));
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
  }
  return st;
}

}  // namespace detail

/// Adam on mean segmentation CE plus lpm_weight × ranking loss over shuffled
/// mini-batches. Starts from `m` with fresh optimizer state.
inline FinetuneResult finetune(const Model& m, const std::vector<Sample>& data, const FinetuneConfig& cfg,
                               std::uint64_t seed) {
  if (data.empty()) throw ValidationError("finetune: empty dataset");
  enable_flush_to_zero();
  if (cfg.epochs < 0 || cfg.batch < 1 || !(cfg.lr > 0) || cfg.lpm_weight < 0) {
    throw ValidationError("finetune: invalid configuration");
  }
  FinetuneResult res{m, {}, {}, {}};
  Adam adam(AdamConfig{cfg.lr});
  std::vector<std::size_t> order(data.size());
  ParamMap grads;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(seed, "shuffle", static_cast<std::uint64_t>(e)));
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    double seg_total = 0, rank_total = 0;
    int batches = 0, dropped = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto st = detail::batch_gradient(res.model, data, idx, cfg.lpm_weight, grads);
      adam.step(res.model.params, grads);
      seg_total += st.seg * static_cast<double>(idx.size());
      rank_total += st.rank;
      ++batches;
      dropped += st.dropped;
    }
    if (dropped > 0) {
      res.warnings.push_back("epoch " + std::to_string(e) + ": " + std::to_string(dropped) +
                             " odd-sized batch(es), last element left out of the ranking loss");
    }
    res.epoch_loss.push_back(seg_total / static_cast<double>(data.size()));
    res.epoch_lpm_loss.push_back(rank_total / batches);
  }
  if (!params_finite(res.model.params)) throw std::runtime_error("finetune: parameters became non-finite");
  return res;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const Architecture& a) {
  return nlohmann::json{{"canvas", a.canvas}, {"gp_channels", a.gp_channels}, {"modes", a.modes}, {"lp1", a.lp1},
                        {"lp2", a.lp2},       {"fuse", a.fuse},               {"ir1", a.ir1},     {"ir2", a.ir2},
                        {"lpm_hidden", a.lpm_hidden}};
}

}  // namespace lada::doinn
