#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stpf/layers.hpp"
#include "stpf/tensor.hpp"

namespace stpf {

template <typename T>
struct NadamConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-7);
};

// Nesterov-Adam with fixed betas:
//   m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
//   m^ = m/(1-b1^(t+1))         v^ = v/(1-b2^t)        g^ = g/(1-b1^t)
//   theta <- theta - lr*(b1*m^ + (1-b1)*g^)/(sqrt(v^) + eps)
// The shared step counter t is 1-based at update time and advances once per
// step() across all parameters.
template <typename T>
class Nadam {
 public:
  Nadam(std::vector<ParamRef<T>> params, NadamConfig<T> cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(size_t(p.tensor.size()), T(0));
      v_.emplace_back(size_t(p.tensor.size()), T(0));
    }
  }

  int64_t step_count() const { return t_; }

  // Applies one update using each parameter's accumulated gradient; a
  // parameter outside the last backward graph contributes g = 0.
  void step() {
    const T bc1 = T(1) - std::pow(cfg_.beta1, T(t_ + 1));
    const T bc1_prev = T(1) - std::pow(cfg_.beta1, T(t_));
    const T bc2 = T(1) - std::pow(cfg_.beta2, T(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto theta = p.tensor.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      const bool has_grad = p.tensor.has_grad();
      const std::span<const T> g = has_grad ? p.tensor.grad() : std::span<const T>();
      for (size_t i = 0; i < theta.size(); ++i) {
        const T gi = has_grad ? g[i] : T(0);
        if (!std::isfinite(gi)) {
          throw NumericError("nadam: non-finite gradient in " + p.name);
        }
        m[i] = cfg_.beta1 * m[i] + (T(1) - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (T(1) - cfg_.beta2) * gi * gi;
        const T m_hat = m[i] / bc1;
        const T v_hat = v[i] / bc2;
        const T g_hat = gi / bc1_prev;
        theta[i] -= cfg_.lr * (cfg_.beta1 * m_hat + (T(1) - cfg_.beta1) * g_hat) /
                    (std::sqrt(v_hat) + cfg_.epsilon);
      }
    }
    t_ += 1;
  }

 private:
  std::vector<ParamRef<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  int64_t t_ = 1;
  NadamConfig<T> cfg_;
};

}  // namespace stpf
