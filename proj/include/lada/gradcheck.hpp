#pragma once

#include <algorithm>
#include <cmath>

#include "lada/tape.hpp"
#include "lada/tensor.hpp"

namespace lada {

struct GradCheckReport {
  double max_rel_error = 0.0;
  /// Smallest |pre-activation| at a ReLU-type kink during the analytic pass.
  double kink_margin = 0.0;
};

/// Compares the 32-bit tape gradient of a scalar function against central
/// differences evaluated in 64-bit. `f` must be callable as
/// `f(Tape<U>&, Var<U>) -> Var<U>` for U = float and U = double.
/// Error per coordinate: |analytic − numeric| / max(1, |analytic|, |numeric|).
template <class F>
GradCheckReport grad_check_report(F&& f, const Tensor& x, double eps = 1e-3) {
  if (!(eps > 0)) throw ValidationError("grad_check: eps must be positive");
  Tape<float> tape;
  auto xv = tape.leaf(x, true);
  auto root = f(tape, xv);
  if (!root.value().is_scalar()) {
    throw ValidationError("grad_check: function output must be scalar, got " + dims_to_string(root.value().dims()));
  }
  tape.backward(root);
  const Tensor analytic = tape.grad(xv);

  BasicTensor<double> x64 = x.cast<double>();
  auto eval = [&](const BasicTensor<double>& at) {
    Tape<double> t64;
    auto v = t64.leaf(at, false);
    return f(t64, v).value().item();
  };
  GradCheckReport rep;
  rep.kink_margin = tape.kink_margin();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x64[i];
    x64[i] = orig + eps;
    const double fp = eval(x64);
    x64[i] = orig - eps;
    const double fm = eval(x64);
    x64[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    rep.max_rel_error = std::max(rep.max_rel_error, err);
  }
  return rep;
}

template <class F>
double grad_check(F&& f, const Tensor& x, double eps = 1e-3) {
  return grad_check_report(std::forward<F>(f), x, eps).max_rel_error;
}

}  // namespace lada
