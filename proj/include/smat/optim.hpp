#pragma once

// AdamW with decoupled weight decay and a reduced-rate backbone group.

#include <cmath>
#include <vector>

#include "smat/nn.hpp"

namespace smat {

struct AdamWConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double backbone_lr_mult = 0.1;
};

template <typename T>
struct AdamWStateT {
  std::vector<std::vector<T>> m, v;
  long long step = 0;
};

template <typename T>
AdamWStateT<T> make_adamw_state(const ParamRegistry<T>& reg) {
  AdamWStateT<T> st;
  for (const auto& e : reg.entries) {
    st.m.emplace_back(e.tensor.size(), T(0));
    st.v.emplace_back(e.tensor.size(), T(0));
  }
  return st;
}

// One update over every registered parameter; lr_scale carries the schedule.
// Decoupled decay: p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps).
template <typename T>
void adamw_step(ParamRegistry<T>& reg, AdamWStateT<T>& st,
                const AdamWConfig& cfg, double lr_scale = 1.0) {
  if (st.m.size() != reg.entries.size())
    fail_shape("adamw_step: state tracks " + std::to_string(st.m.size()) +
               " tensors but the registry has " +
               std::to_string(reg.entries.size()));
  st.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, (double)st.step);
  double bc2 = 1.0 - std::pow(cfg.beta2, (double)st.step);
  for (std::size_t i = 0; i < reg.entries.size(); ++i) {
    auto& e = reg.entries[i];
    auto& p = e.tensor.vec();
    const auto& g = e.tensor.grad();
    if (st.m[i].size() != p.size())
      fail_shape("adamw_step: state size mismatch at " + e.name);
    double lr = cfg.lr * lr_scale * (e.backbone ? cfg.backbone_lr_mult : 1.0);
    for (std::size_t j = 0; j < p.size(); ++j) {
      double gj = g.empty() ? 0.0 : (double)g[j];
      double m = cfg.beta1 * (double)st.m[i][j] + (1.0 - cfg.beta1) * gj;
      double v = cfg.beta2 * (double)st.v[i][j] + (1.0 - cfg.beta2) * gj * gj;
      st.m[i][j] = (T)m;
      st.v[i][j] = (T)v;
      double mhat = m / bc1;
      double vhat = v / bc2;
      double upd = lr * mhat / (std::sqrt(vhat) + cfg.eps);
      p[j] = (T)((double)p[j] - lr * cfg.weight_decay * (double)p[j] - upd);
    }
  }
}

}  // namespace smat
