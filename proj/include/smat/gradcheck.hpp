#pragma once

// Central-difference gradient verification. Run at double precision when
// tight tolerances are wanted; callers are responsible for keeping inputs
// away from non-differentiable kinks (ReLU at 0, abs at 0, clamp edges).

#include <functional>
#include <random>

#include "smat/tensor.hpp"

namespace smat {

template <typename T>
using ScalarFn = std::function<TensorT<T>(const TensorT<T>&)>;

namespace detail {

template <typename T>
T rel_err(T analytic, T numeric) {
  T denom = std::max(T(1e-8), std::abs(analytic) + std::abs(numeric));
  return std::abs(analytic - numeric) / denom;
}

}  // namespace detail

// Max relative error between backward() gradients of f w.r.t. x and central
// differences, over the given coordinates (all coordinates if empty).
template <typename T>
T grad_check_coords(const ScalarFn<T>& f, TensorT<T>& x,
                    const std::vector<long long>& coords, T eps) {
  x.set_requires_grad(true);
  x.zero_grad();
  auto loss = f(x);
  loss.backward();
  std::vector<T> analytic = x.grad();

  std::vector<long long> idxs = coords;
  if (idxs.empty()) {
    idxs.resize(x.size());
    for (long long i = 0; i < x.size(); ++i) idxs[i] = i;
  }

  T worst = 0;
  NoGradGuard ng;
  for (long long i : idxs) {
    T saved = x.vec()[i];
    x.vec()[i] = saved + eps;
    T fp = f(x).item();
    x.vec()[i] = saved - eps;
    T fm = f(x).item();
    x.vec()[i] = saved;
    T numeric = (fp - fm) / (2 * eps);
    worst = std::max(worst, detail::rel_err(analytic[i], numeric));
  }
  return worst;
}

template <typename T>
T grad_check(const ScalarFn<T>& f, TensorT<T>& x, T eps) {
  return grad_check_coords(f, x, {}, eps);
}

// Same check over a seeded random subset of coordinates; used for parameter
// tensors too large to sweep exhaustively.
template <typename T>
T grad_check_sampled(const ScalarFn<T>& f, TensorT<T>& x, T eps,
                     int max_coords, std::mt19937_64& rng) {
  if (x.size() <= max_coords) return grad_check_coords(f, x, {}, eps);
  std::vector<long long> coords(max_coords);
  std::uniform_int_distribution<long long> pick(0, x.size() - 1);
  for (auto& c : coords) c = pick(rng);
  return grad_check_coords(f, x, coords, eps);
}

}  // namespace smat
