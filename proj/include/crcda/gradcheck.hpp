#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>

#include "crcda/ops.hpp"
#include "crcda/tape.hpp"
#include "crcda/tensor.hpp"

namespace crcda {

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::string message;
};

/// Scalar function of one tensor input, recorded on the given tape.
template <class T>
using ScalarFn = std::function<Var<T>(Tape<T>&, Var<T>)>;

/// Compares the tape gradient of `f` at `point` with central differences
/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every coordinate i.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, abs_floor); the
/// floor keeps coordinates with vanishing gradient from dominating.
template <class T>
GradCheckReport finite_diff_check(const ScalarFn<T>& f, const Tensor<T>& point, T eps, double tol,
                                  double abs_floor = 1e-6) {
  require(eps > T(0), "finite_diff_check: eps must be positive");
  GradCheckReport rep;

  Tensor<T> x = point;
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tape<T> tape;
    Var<T> loss = f(tape, tape.param(x));
    if (!std::isfinite(static_cast<double>(loss.value()[0]))) {
      rep.message = "non-finite value at the unperturbed point";
      return rep;
    }
    tape.backward(loss);
  }
  std::vector<T> analytic(x.grad().begin(), x.grad().end());

  auto eval = [&](const Tensor<T>& at) {
    Tensor<T> copy = at;
    copy.set_requires_grad(false);
    Tape<T> tape;
    return static_cast<double>(f(tape, tape.constant(std::move(copy))).value()[0]);
  };

  Tensor<T> probe = point;
  probe.set_requires_grad(false);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const double fp = eval(probe);
    probe[i] = orig - eps;
    const double fm = eval(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.passed = false;
      rep.worst_index = i;
      rep.message = "non-finite value at perturbed coordinate " + std::to_string(i);
      return rep;
    }
    const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
    const double rel = std::abs(a - numeric) / denom;
    if (i == 0 || rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_index = i;
      rep.analytic_at_worst = a;
      rep.numeric_at_worst = numeric;
    }
  }
  rep.passed = rep.max_rel_error <= tol;
  rep.message = rep.passed ? "ok" : "max relative error " + std::to_string(rep.max_rel_error) + " at coordinate " +
                                        std::to_string(rep.worst_index);
  return rep;
}

}  // namespace crcda
