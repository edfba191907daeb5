#pragma once

// AdamW with decoupled weight decay.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "patentret/model.hpp"
#include "patentret/tensor.hpp"

namespace patentret {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>*>>;

/// One AdamW update over the named tensors; tensors without a gradient buffer
/// count as zero-gradient. Throws NumericError naming the first parameter
/// whose gradient is not finite, before anything is modified.
template <class T>
void adamw_step(const NamedTensors<T>& params, OptimizerState<T>& state, double lr, double weight_decay) {
  if (state.step < 0) throw std::invalid_argument("optimizer step count must be nonnegative");
  for (const auto& [name, t] : params) {
    if (!t->grad) continue;
    if (t->grad->size() != t->data.size())
      throw ShapeError("gradient of " + name + " does not match its parameter shape");
    for (T g : *t->grad)
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
  }
  ++state.step;
  const double bc1 = 1 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(state.eps);
  const T decay = static_cast<T>(lr * weight_decay);
  for (const auto& [name, t] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(t->data.size(), T{0});
      v.assign(t->data.size(), T{0});
    } else if (m.size() != t->data.size()) {
      throw ShapeError("optimizer moments of " + name + " do not match its parameter shape");
    }
    const T* g = t->grad ? t->grad->data() : nullptr;
    T* theta = t->data.data();
    T* mp = m.data();
    T* vp = v.data();
    const std::size_t size = t->data.size();
    for (std::size_t i = 0; i < size; ++i) {
      const T gi = g ? g[i] : T{0};
      mp[i] = b1 * mp[i] + (1 - b1) * gi;
      vp[i] = b2 * vp[i] + (1 - b2) * gi * gi;
      // lr * mhat / (sqrt(vhat) + eps) with the bias corrections folded in.
      theta[i] -= step_size * mp[i] / (std::sqrt(vp[i]) * inv_sqrt_bc2 + eps) + decay * theta[i];
    }
  }
}

/// AdamW over all trainable model tensors, then the GeM exponent floor.
template <class T>
void adamw_step(ModelParams<T>& params, OptimizerState<T>& state, double lr, double weight_decay) {
  adamw_step(params.trainable(), state, lr, weight_decay);
  for (auto& p : params.gem_p.data)
    if (p < static_cast<T>(kGemMinExponent)) p = static_cast<T>(kGemMinExponent);
}

}  // namespace patentret
