#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lada/gradcheck.hpp"
#include "lada/ops.hpp"
#include "lada/rng.hpp"

// Finite-difference verification of every differentiable primitive plus three
// composite micro-nets, at seeded random points.
namespace lada {

struct GradSuiteEntry {
  std::string name;
  double max_error = 0.0;
  int points = 0;
  bool passed = false;
};

struct GradSuiteResult {
  std::vector<GradSuiteEntry> entries;
  double seconds = 0.0;
  bool all_passed() const {
    for (const auto& e : entries) {
      if (!e.passed) return false;
    }
    return !entries.empty();
  }
};

namespace gradsuite {

/// Builds (input, f) for one random point.
using PointCase = std::function<double(Rng&, double eps, double& kink)>;

template <class Make>
PointCase make_case(Make make) {
  return [make](Rng& rng, double eps, double& kink) {
    auto [x, f] = make(rng);
    auto rep = grad_check_report(f, x, eps);
    kink = rep.kink_margin;
    return rep.max_rel_error;
  };
}

template <class U>
BasicTensor<U> as(const Tensor& t) {
  return t.template cast<U>();
}

}  // namespace gradsuite

struct GradSuiteOptions {
  int points = 25;
  double eps = 1e-3;
  double tolerance = 5e-3;
  std::uint64_t seed = 20240601;
};

inline GradSuiteResult run_gradient_suite(const GradSuiteOptions& opt = {}) {
  using namespace ops;
  using gradsuite::as;
  using gradsuite::make_case;
  std::vector<std::pair<std::string, gradsuite::PointCase>> cases;

  cases.emplace_back("dense/x", make_case([](Rng& r) {
    Tensor W = r.normal_tensor<float>({3, 5}), b = r.normal_tensor<float>({3}), x = r.normal_tensor<float>({5});
    return std::pair{x, [W, b](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(dense(v, t.constant(as<U>(W)), t.constant(as<U>(b))));
                     }};
  }));
  cases.emplace_back("dense/W", make_case([](Rng& r) {
    Tensor W = r.normal_tensor<float>({3, 4}), x = r.normal_tensor<float>({4}), b = r.normal_tensor<float>({3});
    Tensor wsum = r.normal_tensor<float>({3});
    return std::pair{W, [x, b, wsum](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(mul(dense(t.constant(as<U>(x)), v, t.constant(as<U>(b))), t.constant(as<U>(wsum))));
                     }};
  }));
  cases.emplace_back("conv2d/x zero", make_case([](Rng& r) {
    Tensor k = r.normal_tensor<float>({2, 2, 3, 3}, 0.5), x = r.normal_tensor<float>({2, 5, 5});
    Tensor w = r.normal_tensor<float>({2, 5, 5});
    return std::pair{x, [k, w](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(mul(conv2d(v, t.constant(as<U>(k)), 1, Padding::zero), t.constant(as<U>(w))));
                     }};
  }));
  cases.emplace_back("conv2d/k toroidal stride2", make_case([](Rng& r) {
    Tensor k = r.normal_tensor<float>({2, 1, 3, 3}), x = r.normal_tensor<float>({1, 6, 6});
    Tensor w = r.normal_tensor<float>({2, 3, 3});
    return std::pair{k, [x, w](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(mul(conv2d(t.constant(as<U>(x)), v, 2, Padding::toroidal), t.constant(as<U>(w))));
                     }};
  }));
  cases.emplace_back("spectral_conv/x", make_case([](Rng& r) {
    Tensor mix = r.normal_tensor<float>(spectral_mix_dims(2, 2, 8, 8, 2), 0.5), x = r.normal_tensor<float>({2, 8, 8});
    Tensor w = r.normal_tensor<float>({2, 8, 8});
    return std::pair{x, [mix, w](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(mul(spectral_conv(v, t.constant(as<U>(mix)), 2), t.constant(as<U>(w))));
                     }};
  }));
  cases.emplace_back("spectral_conv/mix", make_case([](Rng& r) {
    Tensor mix = r.normal_tensor<float>(spectral_mix_dims(2, 1, 4, 4, 1), 0.5), x = r.normal_tensor<float>({1, 4, 4});
    Tensor w = r.normal_tensor<float>({2, 4, 4});
    return std::pair{mix, [x, w](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(mul(spectral_conv(t.constant(as<U>(x)), v, 1), t.constant(as<U>(w))));
                     }};
  }));
  for (auto kind : {Activation::relu, Activation::leaky_relu, Activation::tanh, Activation::sigmoid, Activation::softplus}) {
    static const char* names[] = {"relu", "leaky_relu", "tanh", "sigmoid", "softplus"};
    cases.emplace_back(std::string("activation/") + names[static_cast<int>(kind)], make_case([kind](Rng& r) {
      Tensor x = r.normal_tensor<float>({12}, 1.5), w = r.normal_tensor<float>({12});
      return std::pair{x, [w, kind](auto& t, auto v) {
                         using U = typename std::decay_t<decltype(v.value())>::value_type;
                         return sum(mul(apply_activation(v, kind), t.constant(as<U>(w))));
                       }};
    }));
  }
  cases.emplace_back("global_avg_pool", make_case([](Rng& r) {
    Tensor x = r.normal_tensor<float>({3, 4, 4}), w = r.normal_tensor<float>({3});
    return std::pair{x, [w](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(mul(global_avg_pool(v), t.constant(as<U>(w))));
                     }};
  }));
  cases.emplace_back("avg_pool", make_case([](Rng& r) {
    Tensor x = r.normal_tensor<float>({2, 4, 4}), w = r.normal_tensor<float>({2, 2, 2});
    return std::pair{x, [w](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(mul(avg_pool(v, 2), t.constant(as<U>(w))));
                     }};
  }));
  cases.emplace_back("upsample2x", make_case([](Rng& r) {
    Tensor x = r.normal_tensor<float>({2, 3, 3}), w = r.normal_tensor<float>({2, 6, 6});
    return std::pair{x, [w](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(mul(upsample2x(v), t.constant(as<U>(w))));
                     }};
  }));
  cases.emplace_back("softmax_ce", make_case([](Rng& r) {
    Tensor x = r.normal_tensor<float>({2, 3, 3}, 2.0), target({3, 3});
    for (auto& v : target.values()) v = r.uniform() < 0.5 ? 0.0f : 1.0f;
    return std::pair{x, [target](auto&, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return softmax_ce(v, as<U>(target));
                     }};
  }));
  cases.emplace_back("softmax_ce_soft", make_case([](Rng& r) {
    Tensor x = r.normal_tensor<float>({2, 3, 3}, 2.0), target({2, 3, 3});
    for (int i = 0; i < 9; ++i) {
      const float p = static_cast<float>(r.uniform());
      target[i] = p;
      target[9 + i] = 1.0f - p;
    }
    return std::pair{x, [target](auto&, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return softmax_ce_soft(v, as<U>(target));
                     }};
  }));
  cases.emplace_back("softmax_channels", make_case([](Rng& r) {
    Tensor x = r.normal_tensor<float>({2, 3, 3}, 2.0), w = r.normal_tensor<float>({2, 3, 3});
    return std::pair{x, [w](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       return sum(mul(softmax_channels(v), t.constant(as<U>(w))));
                     }};
  }));
  cases.emplace_back("channel_affine", make_case([](Rng& r) {
    Tensor x = r.normal_tensor<float>({2 + 2 * 3 * 3}), w = r.normal_tensor<float>({2, 3, 3});
    Tensor shift = r.normal_tensor<float>({2});
    return std::pair{x, [w, shift](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       auto s = slice(v, 0, 2);
                       auto img = reshape(slice(v, 2, 18), Dims{2, 3, 3});
                       return sum(mul(channel_affine(img, s, t.constant(as<U>(shift))), t.constant(as<U>(w))));
                     }};
  }));
  cases.emplace_back("add_scaled_map", make_case([](Rng& r) {
    Tensor x = r.normal_tensor<float>({2 + 9}), base = r.normal_tensor<float>({2, 3, 3});
    Tensor w = r.normal_tensor<float>({2, 3, 3});
    return std::pair{x, [base, w](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       auto gain = slice(v, 0, 2);
                       auto map = reshape(slice(v, 2, 9), Dims{1, 3, 3});
                       return sum(mul(add_scaled_map(t.constant(as<U>(base)), gain, map), t.constant(as<U>(w))));
                     }};
  }));
  cases.emplace_back("arith div/sub/concat", make_case([](Rng& r) {
    Tensor x = r.normal_tensor<float>({6});
    return std::pair{x, [](auto&, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       auto a = slice(v, 0, 3);
                       auto b = slice(v, 3, 3);
                       auto den = add_scalar(mul(b, b), U(1));
                       auto q = div(sub(a, b), den);
                       return mean(mul(concat(std::vector{q, a}), concat(std::vector{a, q})));
                     }};
  }));

  // Composite micro-nets.
  cases.emplace_back("micro-net conv2d>relu>gap>dense", make_case([](Rng& r) {
    Tensor k = r.normal_tensor<float>({3, 1, 3, 3}, 0.5), W = r.normal_tensor<float>({2, 3}), b = r.normal_tensor<float>({2});
    Tensor x = r.normal_tensor<float>({1, 5, 5});
    return std::pair{x, [k, W, b](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       auto h = relu(conv2d(v, t.constant(as<U>(k)), 1, Padding::zero));
                       auto o = dense(global_avg_pool(h), t.constant(as<U>(W)), t.constant(as<U>(b)));
                       return sum(mul(o, o));
                     }};
  }));
  cases.emplace_back("micro-net spectral>tanh>upsample>conv", make_case([](Rng& r) {
    Tensor mix = r.normal_tensor<float>(spectral_mix_dims(2, 1, 4, 4, 2), 0.5);
    Tensor k = r.normal_tensor<float>({1, 2, 3, 3}, 0.5);
    Tensor x = r.normal_tensor<float>({1, 4, 4});
    return std::pair{x, [mix, k](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       auto h = tanh(spectral_conv(v, t.constant(as<U>(mix)), 2));
                       auto o = conv2d(upsample2x(h), t.constant(as<U>(k)), 1, Padding::toroidal);
                       return mean(mul(o, o));
                     }};
  }));
  cases.emplace_back("micro-net style-mod>leaky>softmax>dice", make_case([](Rng& r) {
    Tensor k = r.normal_tensor<float>({2, 2, 3, 3}, 0.5), A = r.normal_tensor<float>({4, 3}, 0.5);
    Tensor a_b = r.normal_tensor<float>({4}, 0.5), gain = r.normal_tensor<float>({2}), noise = r.normal_tensor<float>({1, 4, 4});
    Tensor x = r.normal_tensor<float>({3 + 2 * 4 * 4});
    return std::pair{x, [k, A, a_b, gain, noise](auto& t, auto v) {
                       using U = typename std::decay_t<decltype(v.value())>::value_type;
                       auto w = slice(v, 0, 3);
                       auto img = reshape(slice(v, 3, 32), Dims{2, 4, 4});
                       auto style = dense(w, t.constant(as<U>(A)), t.constant(as<U>(a_b)));
                       auto h = conv2d(img, t.constant(as<U>(k)), 1, Padding::zero);
                       h = channel_affine(h, add_scalar(slice(style, 0, 2), U(1)), slice(style, 2, 2));
                       h = leaky_relu(add_scaled_map(h, t.constant(as<U>(gain)), t.constant(as<U>(noise))));
                       auto p = softmax_channels(h);
                       auto p0 = slice(p, 0, 1), p1 = slice(p, 1, 1);
                       auto num = sum(mul(p0, p1));
                       auto den = add(sum(mul(p0, p0)), sum(mul(p1, p1)));
                       return scale(div(num, den), U(-2));
                     }};
  }));

  const auto start = std::chrono::steady_clock::now();
  GradSuiteResult result;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    GradSuiteEntry entry;
    entry.name = cases[ci].first;
    Rng rng(derive_seed(opt.seed, entry.name, ci));
    for (int p = 0; p < opt.points; ++p) {
      double err = 0.0, kink = 0.0;
      // Resample points whose pre-activations sit too close to a kink.
      for (int attempt = 0; attempt < 200; ++attempt) {
        err = cases[ci].second(rng, opt.eps, kink);
        if (kink >= 10.0 * opt.eps) break;
      }
      entry.max_error = std::max(entry.max_error, err);
      ++entry.points;
    }
    entry.passed = entry.max_error < opt.tolerance;
    result.entries.push_back(entry);
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace lada
