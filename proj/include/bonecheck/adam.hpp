#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bonecheck/error.hpp"
#include "bonecheck/tensor.hpp"

namespace bonecheck {

/// Adam hyperparameters. `decay` is a per-step inverse-time learning-rate
/// decay: lr_t = lr / (1 + decay * t).
struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  double decay = 1e-4;
  bool amsgrad = false;
};

template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::uint64_t t = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::vector<Tensor<T>> v_max;  // amsgrad only

  AdamState() = default;
  AdamState(const std::vector<Tensor<T>>& params, AdamHyper h) : hyper(h) {
    for (const auto& p : params) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
      if (hyper.amsgrad) v_max.emplace_back(p.shape());
    }
  }
};

/// One Adam update in place:
///   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
///   m_hat = m / (1-b1^t); v_hat = v / (1-b2^t)
///   theta -= lr_t * m_hat / (sqrt(v_hat) + eps)
/// `names` labels parameters in error messages.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               const std::vector<std::string>& names = {}) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters, " + std::to_string(grads.size()) +
                     " gradients, " + std::to_string(state.m.size()) + " moment tensors");
  }
  auto label = [&](std::size_t i) { return i < names.size() ? names[i] : "#" + std::to_string(i); };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) {
      throw ShapeError("adam_step: gradient for parameter " + label(i) + " has shape " +
                       shape_string(grads[i].shape()) + ", parameter has " + shape_string(params[i].shape()));
    }
    if (!grads[i].all_finite()) throw NumericError("adam_step: non-finite gradient for parameter " + label(i));
  }

  const AdamHyper& h = state.hyper;
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double lr_t = h.lr / (1.0 + h.decay * t);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i].data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    const T* g = grads[i].data();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      const double gk = g[k];
      const double mk = h.beta1 * m[k] + (1.0 - h.beta1) * gk;
      const double vk = h.beta2 * v[k] + (1.0 - h.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      double v_used = vk;
      if (h.amsgrad) {
        T& vm = state.v_max[i][k];
        vm = std::max(vm, static_cast<T>(vk));
        v_used = vm;
      }
      const double m_hat = mk / bc1;
      const double v_hat = v_used / bc2;
      p[k] = static_cast<T>(p[k] - lr_t * m_hat / (std::sqrt(v_hat) + h.epsilon));
    }
  }
}

}  // namespace bonecheck
