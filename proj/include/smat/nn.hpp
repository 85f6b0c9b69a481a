#pragma once

// Shared network building blocks: seeded initialization, the inverted
// residual convolution block, and the named-parameter registry used by the
// optimizer, checkpointing and parameter reports.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "smat/ops.hpp"
#include "smat/tensor.hpp"

namespace smat {

// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)); same rng state -> same values.
template <typename T>
TensorT<T> init_params(Shape shape, long long fan_in, std::mt19937_64& rng) {
  if (fan_in <= 0) fail_shape("init_params: fan_in must be positive");
  double bound = std::sqrt(1.0 / (double)fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto t = TensorT<T>::zeros(std::move(shape));
  for (auto& v : t.vec()) v = (T)dist(rng);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
TensorT<T> zeros_param(Shape shape) {
  auto t = TensorT<T>::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

// ---- parameter registry ----

template <typename T>
struct ParamEntry {
  std::string name;
  TensorT<T> tensor;
  bool backbone = false;  // backbone group trains at a reduced learning rate
};

template <typename T>
struct ParamRegistry {
  std::vector<ParamEntry<T>> entries;

  void add(std::string name, TensorT<T> t, bool backbone) {
    entries.push_back({std::move(name), std::move(t), backbone});
  }
  long long total_count() const {
    long long n = 0;
    for (const auto& e : entries) n += e.tensor.size();
    return n;
  }
  long long count_with_prefix(const std::string& prefix) const {
    long long n = 0;
    for (const auto& e : entries)
      if (e.name.rfind(prefix, 0) == 0) n += e.tensor.size();
    return n;
  }
  void zero_grads() {
    for (auto& e : entries) e.tensor.zero_grad();
  }
};

// ---- layer norm parameters ----

template <typename T>
struct NormParamsT {
  TensorT<T> gamma, beta;
};

template <typename T>
NormParamsT<T> make_norm_params(int d) {
  NormParamsT<T> p;
  p.gamma = TensorT<T>::full({d}, T(1));
  p.gamma.set_requires_grad(true);
  p.beta = zeros_param<T>({d});
  return p;
}

template <typename T>
void register_norm(ParamRegistry<T>& reg, const std::string& prefix,
                   NormParamsT<T>& p, bool backbone) {
  reg.add(prefix + ".gamma", p.gamma, backbone);
  reg.add(prefix + ".beta", p.beta, backbone);
}

// ---- inverted residual block ----
// 1x1 expansion (xE) -> 3x3 depthwise at the block stride -> 1x1 linear
// projection, ReLU after the first two convs, skip connection iff stride 1
// and channel counts match.

template <typename T>
struct InvertedResidualT {
  int in_channels = 0, out_channels = 0, stride = 1;
  TensorT<T> expand_w, expand_b;    // {1,1,Cin,e*Cin}, {e*Cin}
  TensorT<T> dw_w, dw_b;            // {3,3,1,e*Cin}, {e*Cin}
  TensorT<T> project_w, project_b;  // {1,1,e*Cin,Cout}, {Cout}
};

template <typename T>
InvertedResidualT<T> make_inverted_residual(int cin, int cout, int stride,
                                            int expansion,
                                            std::mt19937_64& rng) {
  if (cin <= 0 || cout <= 0 || expansion < 1 || (stride != 1 && stride != 2))
    fail_shape("inverted residual: bad config cin=" + std::to_string(cin) +
               " cout=" + std::to_string(cout) +
               " stride=" + std::to_string(stride));
  int ce = cin * expansion;
  InvertedResidualT<T> p;
  p.in_channels = cin;
  p.out_channels = cout;
  p.stride = stride;
  p.expand_w = init_params<T>({1, 1, cin, ce}, cin, rng);
  p.expand_b = zeros_param<T>({ce});
  p.dw_w = init_params<T>({3, 3, 1, ce}, 9, rng);
  p.dw_b = zeros_param<T>({ce});
  p.project_w = init_params<T>({1, 1, ce, cout}, ce, rng);
  p.project_b = zeros_param<T>({cout});
  return p;
}

template <typename T>
TensorT<T> inverted_residual_forward(const TensorT<T>& x,
                                     const InvertedResidualT<T>& p) {
  if (x.shape().size() != 3 || x.shape()[2] != p.in_channels)
    fail_shape("inverted residual: input " + shape_str(x.shape()) +
               " does not carry " + std::to_string(p.in_channels) +
               " channels");
  auto h = relu(add_channel_bias(conv2d(x, p.expand_w, 1, 0), p.expand_b));
  int ce = p.expand_w.shape()[3];
  h = relu(add_channel_bias(conv2d(h, p.dw_w, p.stride, 1, ce), p.dw_b));
  h = add_channel_bias(conv2d(h, p.project_w, 1, 0), p.project_b);
  if (p.stride == 1 && p.in_channels == p.out_channels) h = add(h, x);
  return h;
}

template <typename T>
void register_inverted_residual(ParamRegistry<T>& reg,
                                const std::string& prefix,
                                InvertedResidualT<T>& p, bool backbone) {
  reg.add(prefix + ".expand_w", p.expand_w, backbone);
  reg.add(prefix + ".expand_b", p.expand_b, backbone);
  reg.add(prefix + ".dw_w", p.dw_w, backbone);
  reg.add(prefix + ".dw_b", p.dw_b, backbone);
  reg.add(prefix + ".project_w", p.project_w, backbone);
  reg.add(prefix + ".project_b", p.project_b, backbone);
}

}  // namespace smat
