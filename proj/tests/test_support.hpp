// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit tests: random tensors and finite-difference
// oracles that only ever evaluate forward values.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "metainterp/autodiff.hpp"
#include "metainterp/tensor.hpp"

namespace mi::testing {

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                            double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = normal(rng);
  return t;
}

inline double rel_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Scalar function of several tensors, evaluated on whatever tape it is handed.
using ScalarFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& xs) {
  ad::Tape tape(false);
  std::vector<ad::Var> vars;
  for (const auto& x : xs) vars.push_back(tape.constant(x));
  return f(tape, vars).item();
}

/// Central-difference gradient of f with respect to xs[which], entry `index`.
inline double fd_partial(const ScalarFn& f, std::vector<Tensor> xs, std::size_t which,
                         std::size_t index, double step) {
  const double x0 = xs[which][index];
  xs[which][index] = x0 + step;
  const double up = eval_scalar(f, xs);
  xs[which][index] = x0 - step;
  const double down = eval_scalar(f, xs);
  return (up - down) / (2.0 * step);
}

/// Analytic gradients from the tape.
inline std::vector<Tensor> tape_gradients(const ScalarFn& f, const std::vector<Tensor>& xs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& x : xs) vars.push_back(tape.variable(x));
  ad::Var out = f(tape, vars);
  auto grads = ad::grad(out, vars);
  std::vector<Tensor> result;
  for (const auto& g : grads) result.push_back(g.value());
  return result;
}

/// Worst relative error between tape gradients and central differences over
/// every entry of every input.
inline double max_gradient_error(const ScalarFn& f, const std::vector<Tensor>& xs,
                                 double step = 1e-5) {
  auto grads = tape_gradients(f, xs);
  double worst = 0.0;
  for (std::size_t w = 0; w < xs.size(); ++w) {
    for (std::size_t i = 0; i < xs[w].size(); ++i) {
      worst = std::max(worst, rel_error(grads[w][i], fd_partial(f, xs, w, i, step)));
    }
  }
  return worst;
}

/// Hessian-vector product through double backward.
inline Tensor tape_hvp(const ScalarFn& f, const Tensor& x, const Tensor& v) {
  ad::Tape tape;
  ad::Var xv = tape.variable(x);
  std::vector<ad::Var> in{xv};
  ad::Var out = f(tape, in);
  auto g = ad::grad(out, in, true);
  ad::Var vv = tape.constant(v);
  auto hv = ad::grad(std::span<const ad::Var>(g), in, std::span<const ad::Var>(&vv, 1), false);
  return hv[0].value();
}

/// (∇f(x + h v) − ∇f(x − h v)) / 2h.
inline Tensor fd_hvp(const ScalarFn& f, const Tensor& x, const Tensor& v, double step = 1e-4) {
  Tensor up = tape_gradients(f, {x + step * v})[0];
  Tensor down = tape_gradients(f, {x - step * v})[0];
  return (1.0 / (2.0 * step)) * (up - down);
}

/// ‖a − b‖∞ / max(‖b‖∞, floor).
inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-3) {
  return max_abs_diff(a, b) / std::max(max_abs(b), floor);
}

}  // namespace mi::testing
