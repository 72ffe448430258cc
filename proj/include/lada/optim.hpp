#pragma once

#include <cmath>
#include <map>
#include <string>

#include "lada/params.hpp"

namespace lada {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates for one tensor. `direction` folds in a gradient and
/// returns the bias-corrected step direction m̂ / (sqrt(v̂) + eps).
class AdamMoments {
 public:
  AdamMoments() = default;
  explicit AdamMoments(const Dims& dims) : m_(dims), v_(dims) {}

  Tensor direction(const Tensor& grad, const AdamConfig& cfg) {
    if (m_.empty()) {
      m_ = Tensor(grad.dims());
      v_ = Tensor(grad.dims());
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg.beta2, t_);
    Tensor dir(grad.dims());
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double g = grad[i];
      const double m = cfg.beta1 * m_[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * v_[i] + (1.0 - cfg.beta2) * g * g;
      m_[i] = static_cast<float>(m);
      v_[i] = static_cast<float>(v);
      dir[i] = static_cast<float>((m / c1) / (std::sqrt(v / c2) + cfg.eps));
    }
    return dir;
  }

  int steps() const noexcept { return t_; }

 private:
  Tensor m_, v_;
  int t_ = 0;
};

/// Adam descent over a named parameter map.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamMap& params, const ParamMap& grads) {
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      Tensor dir = moments_[name].direction(git->second, cfg_);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= static_cast<float>(cfg_.lr) * dir[i];
    }
  }

  AdamConfig& config() noexcept { return cfg_; }

 private:
  AdamConfig cfg_;
  std::map<std::string, AdamMoments> moments_;
};

}  // namespace lada
