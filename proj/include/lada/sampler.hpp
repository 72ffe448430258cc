#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lada/doinn.hpp"
#include "lada/image.hpp"
#include "lada/litho.hpp"
#include "lada/ops.hpp"
#include "lada/optim.hpp"
#include "lada/parallel.hpp"
#include "lada/patterns.hpp"
#include "lada/stylegan.hpp"

// Membership-query synthesis: gradient ascent in the generator's style latent
// or noise inputs against an acquisition criterion read off the surrogate.
namespace lada::sampler {

enum class Strategy { shape, random, style_dice, noise_CE, style_pred, noise_pred };
enum class Domain { style, noise };
enum class Criterion { pred, dice, ce };
enum class DiceInput { probabilities, logits };

inline constexpr std::array<Strategy, 6> kAllStrategies = {Strategy::shape,    Strategy::random,     Strategy::style_dice,
                                                          Strategy::noise_CE, Strategy::style_pred, Strategy::noise_pred};

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::shape: return "shape";
    case Strategy::random: return "random";
    case Strategy::style_dice: return "style_dice";
    case Strategy::noise_CE: return "noise_CE";
    case Strategy::style_pred: return "style_pred";
    case Strategy::noise_pred: return "noise_pred";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& name) {
  for (Strategy s : kAllStrategies) {
    if (to_string(s) == name) return s;
  }
  throw ValidationError("unknown strategy '" + name + "' (expected shape, random, style_dice, noise_CE, style_pred, noise_pred)");
}

/// Domain and criterion of an ascent strategy; nothing for shape/random.
inline std::optional<std::pair<Domain, Criterion>> ascent_of(Strategy s) {
  switch (s) {
    case Strategy::style_dice: return std::pair{Domain::style, Criterion::dice};
    case Strategy::noise_CE: return std::pair{Domain::noise, Criterion::ce};
    case Strategy::style_pred: return std::pair{Domain::style, Criterion::pred};
    case Strategy::noise_pred: return std::pair{Domain::noise, Criterion::pred};
    default: return std::nullopt;
  }
}

struct AscentConfig {
  double lambda1 = 0.1;  // style prior weight
  double lambda2 = 0.1;  // noise prior weight
  int steps = 50;
  double lr = 0.05;
  double criterion_scale = 1.0;  // multiplies C inside J; 1 everywhere but the scale-invariance check
  DiceInput dice_input = DiceInput::probabilities;

  friend bool operator==(const AscentConfig&, const AscentConfig&) = default;
};

inline constexpr int kMaxHalvings = 5;
inline constexpr int kMaxDuplicateRetries = 10;

inline void validate(const AscentConfig& c) {
  if (c.steps < 0) throw ValidationError("ascent: steps must be >= 0");
  if (!(c.lr > 0)) throw ValidationError("ascent: lr must be > 0");
  if (c.lambda1 < 0 || c.lambda2 < 0) throw ValidationError("ascent: lambdas must be >= 0");
  if (!(c.criterion_scale > 0)) throw ValidationError("ascent: criterion_scale must be > 0");
}

// ---------------------------------------------------------------- log prior

inline const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

/// (1/d)·log N(v; 0, I) over all entries of `parts` taken together.
template <class T>
Var<T> log_prior(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ValidationError("log_prior: no inputs");
  std::size_t d = 0;
  Var<T> sq;
  for (const auto& v : parts) {
    d += v.value().size();
    auto s = ops::sum(ops::square(v));
    sq = sq.valid() ? ops::add(sq, s) : s;
  }
  if (d == 0) throw ValidationError("log_prior: dimension must be >= 1");
  return ops::add_scalar(ops::scale(sq, static_cast<T>(-0.5 / static_cast<double>(d))), static_cast<T>(-kHalfLog2Pi));
}

inline double log_prior(std::span<const float> v) {
  if (v.empty()) throw ValidationError("log_prior: dimension must be >= 1");
  double sq = 0;
  for (float x : v) sq += static_cast<double>(x) * x;
  return -0.5 * sq / static_cast<double>(v.size()) - kHalfLog2Pi;
}

// ---------------------------------------------------------------- criteria

/// −2Σpq / (Σp² + Σq²) over the two channel fields of `fields` (2×H×W).
template <class T>
Var<T> dice_score(Var<T> fields) {
  using namespace ops;
  if (fields.dims().size() != 3 || fields.dims()[0] != 2) throw ValidationError("dice_score: fields must be 2×H×W");
  auto p = slice(fields, 0, 1), q = slice(fields, 1, 1);
  return scale(div(sum(mul(p, q)), add(sum(square(p)), sum(square(q)))), T(-2));
}

template <class T>
Var<T> criterion_pred(const Bound<T>& f, const doinn::Architecture& arch, Var<T> image) {
  return doinn::lpm_predict(f, doinn::forward(f, arch, image).taps);
}

template <class T>
Var<T> criterion_dice(const Bound<T>& f, const doinn::Architecture& arch, Var<T> image,
                      DiceInput input = DiceInput::probabilities) {
  auto logits = doinn::forward(f, arch, image).logits;
  return dice_score(input == DiceInput::probabilities ? ops::softmax_channels(logits) : logits);
}

/// Soft cross-entropy of F's output against a frozen reference distribution.
template <class T>
Var<T> criterion_ce(const Bound<T>& f, const doinn::Architecture& arch, Var<T> image, const BasicTensor<T>& reference) {
  return ops::softmax_ce_soft(doinn::forward(f, arch, image).logits, reference);
}

/// Softmax of F at G(z, 0): the no-gradient reference of the CE criterion.
inline Tensor ce_reference(const doinn::Model& f, const style::Generator& g, const Tensor& z) {
  Tape<float> tape;
  Bound<float> fp(tape, f.params, false);
  return ops::softmax_channels(doinn::forward(fp, f.arch, tape.constant(style::generate(g, z, style::NoiseBank::zeros()))).logits)
      .value();
}

// ---------------------------------------------------------------- ascent

struct Ascent {
  Tensor z;
  style::NoiseBank noise;
  std::vector<double> trace;  // J at the start, then after each accepted step
  int steps_accepted = 0;
  double criterion_init = 0, criterion_final = 0;
};

namespace detail {

/// One evaluation of J (and C) at (z, noise), with gradients w.r.t. the
/// optimized domain when `want_grad`.
struct Eval {
  double j = 0, c = 0;
  std::vector<Tensor> grad;  // [z] or the four noise maps
};

class Objective {
 public:
  Objective(const doinn::Model& f, const style::Generator& g, Domain domain, Criterion criterion, const AscentConfig& cfg,
            const Tensor& z)
      : f_(f), g_(g), domain_(domain), criterion_(criterion), cfg_(cfg) {
    if (criterion == Criterion::ce) {
      if (domain != Domain::noise) throw ValidationError("criterion_ce is defined for the noise domain only");
      reference_ = ce_reference(f, g, z);
    }
  }

  Eval operator()(const Tensor& z, const style::NoiseBank& noise, bool want_grad) const {
    Tape<float> tape;
    Bound<float> gp(tape, g_.params, false);
    Bound<float> fp(tape, f_.params, false);
    const bool in_style = domain_ == Domain::style;
    auto zv = tape.leaf(z, want_grad && in_style);
    std::array<Var<float>, style::kBlocks> maps;
    for (int b = 0; b < style::kBlocks; ++b) maps[b] = tape.leaf(noise.maps[b], want_grad && !in_style);
    auto image = style::synthesize(gp, zv, maps);
    Var<float> c;
    switch (criterion_) {
      case Criterion::pred: c = criterion_pred(fp, f_.arch, image); break;
      case Criterion::dice: c = criterion_dice(fp, f_.arch, image, cfg_.dice_input); break;
      case Criterion::ce: c = criterion_ce(fp, f_.arch, image, reference_); break;
    }
    auto prior = in_style ? log_prior<float>({zv}) : log_prior<float>(std::vector<Var<float>>(maps.begin(), maps.end()));
    const float lambda = static_cast<float>(in_style ? cfg_.lambda1 : cfg_.lambda2);
    auto j = ops::add(ops::scale(c, static_cast<float>(cfg_.criterion_scale)), ops::scale(prior, lambda));
    Eval e{j.value()[0], c.value()[0], {}};
    if (want_grad) {
      tape.backward(j);
      if (in_style) {
        e.grad.push_back(tape.grad(zv));
      } else {
        for (const auto& m : maps) e.grad.push_back(tape.grad(m));
      }
    }
    return e;
  }

 private:
  const doinn::Model& f_;
  const style::Generator& g_;
  Domain domain_;
  Criterion criterion_;
  AscentConfig cfg_;
  Tensor reference_;
};

}  // namespace detail

/// Ascends J = C + λ·log_prior over z (style; noise fixed to 0) or over the
/// noise bank (noise; z drawn once and frozen). Steps follow the Adam
/// direction; a candidate that lowers J is discarded and lr halved, and the
/// run ends after kMaxHalvings consecutive rejections.
inline Ascent optimize_latent(const doinn::Model& f, const style::Generator& g, Domain domain, Criterion criterion,
                              const AscentConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  Ascent a;
  a.z = style::sample_latent(rng);
  a.noise = domain == Domain::style ? style::NoiseBank::zeros() : style::NoiseBank::normal(rng);
  const detail::Objective objective(f, g, domain, criterion, cfg, a.z);

  auto cur = objective(a.z, a.noise, cfg.steps > 0);
  a.trace.push_back(cur.j);
  a.criterion_init = a.criterion_final = cur.c;
  if (cfg.steps == 0) return a;

  const AdamConfig adam{cfg.lr};
  std::vector<AdamMoments> moments(cur.grad.size());
  double lr = cfg.lr;
  auto coords = [&](Ascent& s) -> std::vector<Tensor*> {
    if (domain == Domain::style) return {&s.z};
    std::vector<Tensor*> out;
    for (auto& m : s.noise.maps) out.push_back(&m);
    return out;
  };
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> dirs;
    for (std::size_t k = 0; k < cur.grad.size(); ++k) dirs.push_back(moments[k].direction(cur.grad[k], adam));
    bool accepted = false;
    for (int halving = 0; halving <= kMaxHalvings; ++halving) {
      Ascent cand = a;
      auto dst = coords(cand);
      for (std::size_t k = 0; k < dst.size(); ++k) {
        Tensor& t = *dst[k];
        // Adam's normalized gradient of J, added since J is maximized.
        for (std::size_t i = 0; i < t.size(); ++i) t[i] += static_cast<float>(lr) * dirs[k][i];
      }
      auto next = objective(cand.z, cand.noise, true);
      if (next.j >= cur.j) {
        a.z = std::move(cand.z);
        a.noise = std::move(cand.noise);
        cur = std::move(next);
        accepted = true;
        break;
      }
      if (halving < kMaxHalvings) lr *= 0.5;
    }
    if (!accepted) break;
    ++a.steps_accepted;
    a.trace.push_back(cur.j);
    a.criterion_final = cur.c;
  }
  return a;
}

/// C at (z, noise) for a given criterion, with the CE reference taken at (z, 0).
inline double evaluate_criterion(const doinn::Model& f, const style::Generator& g, Criterion criterion, const Tensor& z,
                                 const style::NoiseBank& noise, DiceInput dice_input = DiceInput::probabilities) {
  AscentConfig cfg;
  cfg.dice_input = dice_input;
  cfg.lambda1 = cfg.lambda2 = 0;
  const detail::Objective objective(f, g, criterion == Criterion::ce ? Domain::noise : Domain::style, criterion, cfg, z);
  return objective(z, noise, false).c;
}

// ---------------------------------------------------------------- batches

struct Proposal {
  MaskImage mask;
  Strategy strategy = Strategy::shape;
  std::uint64_t seed = 0;  // seed of the draw that produced this mask
  int steps_accepted = 0;
  std::optional<double> criterion_init, criterion_final;
  bool duplicate = false;
};

struct ProposeOptions {
  AscentConfig ascent;
  patterns::DesignRules rules;
};

inline Proposal propose_one(Strategy strategy, const doinn::Model& f, const style::Generator& g, std::uint64_t seed,
                            const ProposeOptions& opt) {
  Proposal p;
  p.strategy = strategy;
  p.seed = seed;
  if (strategy == Strategy::shape) {
    p.mask = patterns::generate_pattern(opt.rules, seed);
  } else if (strategy == Strategy::random) {
    p.mask = style::sample_mask(g, seed, style::NoiseMode::random).mask;
  } else {
    const auto [domain, criterion] = *ascent_of(strategy);
    const auto a = optimize_latent(f, g, domain, criterion, opt.ascent, seed);
    p.mask = litho::legalize(style::generate(g, a.z, a.noise));
    p.steps_accepted = a.steps_accepted;
    p.criterion_init = a.criterion_init;
    p.criterion_final = a.criterion_final;
  }
  return p;
}

/// B legalized masks. Candidate k draws from its own seed stream, so the
/// batch is independent of scheduling. A mask bit-identical to an earlier
/// one is redrawn up to kMaxDuplicateRetries times, then kept and flagged.
inline std::vector<Proposal> propose_batch(Strategy strategy, const doinn::Model& f, const style::Generator& g, int budget,
                                           std::uint64_t seed, const ProposeOptions& opt = {}) {
  if (budget < 1) throw ValidationError("propose_batch: budget must be >= 1");
  validate(opt.ascent);
  const auto n = static_cast<std::size_t>(budget);
  auto draw_seed = [&](std::size_t k, int retry) {
    const auto base = derive_seed(seed, "candidate", k);
    return retry == 0 ? base : derive_seed(base, "retry", static_cast<std::uint64_t>(retry));
  };
  std::vector<Proposal> out(n);
  parallel_for(n, [&](std::size_t k) { out[k] = propose_one(strategy, f, g, draw_seed(k, 0), opt); });
  for (std::size_t k = 1; k < n; ++k) {
    auto seen = [&](const MaskImage& m) {
      for (std::size_t j = 0; j < k; ++j) {
        if (out[j].mask == m) return true;
      }
      return false;
    };
    for (int retry = 1; seen(out[k].mask); ++retry) {
      if (retry > kMaxDuplicateRetries) {
        out[k].duplicate = true;
        break;
      }
      out[k] = propose_one(strategy, f, g, draw_seed(k, retry), opt);
    }
  }
  return out;
}

inline nlohmann::json to_json(const Proposal& p) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"strategy", to_string(p.strategy)},
          {"seed", p.seed},
          {"steps_accepted", p.steps_accepted},
          {"criterion_init", opt(p.criterion_init)},
          {"criterion_final", opt(p.criterion_final)},
          {"duplicate", p.duplicate}};
}

/// Writes <dir>/<stem>.pgm and the provenance sidecar <dir>/<stem>.json.
inline void write_proposal(const std::filesystem::path& dir, const std::string& stem, const Proposal& p) {
  std::filesystem::create_directories(dir);
  write_pgm((dir / (stem + ".pgm")).string(), p.mask);
  std::ofstream js(dir / (stem + ".json"));
  if (!js) throw std::runtime_error("cannot write " + (dir / (stem + ".json")).string());
  js << to_json(p).dump(2) << "\n";
}

}  // namespace lada::sampler
