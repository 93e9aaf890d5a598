#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "propih/tensor.hpp"

namespace propih {

// Adam with bias correction. Moment slots are positional: the caller must
// pass the same parameter list, in the same order, on every step (model
// parameter lists are built deterministically, and checkpoints persist the
// slots by parameter name).
template <typename T>
struct AdamState {
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<Slot> slots;
  std::int64_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
AdamState<T> adam_init(const std::vector<Tensor<T>*>& params, double lr) {
  AdamState<T> st;
  st.lr = lr;
  st.slots.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::size_t n = static_cast<std::size_t>(params[i]->numel());
    st.slots[i].m.assign(n, T(0));
    st.slots[i].v.assign(n, T(0));
  }
  return st;
}

// One update over all parameters. A parameter whose grad is empty is treated
// as having zero gradient: moments decay, and from a fresh state the value is
// unchanged. Does not clear gradients; callers zero them explicitly.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& st) {
  if (params.size() != st.slots.size())
    fail_validation("adam_step: ", params.size(), " params vs ", st.slots.size(),
                    " state slots");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    auto& slot = st.slots[i];
    if (slot.m.size() != static_cast<std::size_t>(p.numel()))
      fail_validation("adam_step: slot ", i, " sized ", slot.m.size(),
                      " for param with ", p.numel(), " values");
    const std::vector<T>& g = p.grad();
    std::vector<T>& w = p.mutable_values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
      double m = st.beta1 * static_cast<double>(slot.m[j]) + (1.0 - st.beta1) * gj;
      double v = st.beta2 * static_cast<double>(slot.v[j]) + (1.0 - st.beta2) * gj * gj;
      slot.m[j] = static_cast<T>(m);
      slot.v[j] = static_cast<T>(v);
      double mhat = m / bc1;
      double vhat = v / bc2;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - st.lr * mhat / (std::sqrt(vhat) + st.eps));
    }
  }
}

}  // namespace propih
