#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "effir/tensor.hpp"

namespace effir {

template <typename T>
struct AdamConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  std::size_t warmup_steps = 0;  // linear ramp to lr, then constant
};

// Adam over a fixed parameter list. Parameters are shallow handles; the
// optimizer reads their grad buffers and writes their data in place.
template <typename T>
class AdamT {
 public:
  AdamT(std::vector<TensorT<T>> params, AdamConfig<T> config)
      : params_(std::move(params)), config_(config) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& p : params_) {
      if (!p.requires_grad()) throw ContractError("optimizer given a parameter without grad");
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  // One update from the currently accumulated gradients; clears them after.
  void step() {
    ++t_;
    T lr = config_.lr;
    if (config_.warmup_steps > 0 && t_ < config_.warmup_steps)
      lr = config_.lr * static_cast<T>(t_) / static_cast<T>(config_.warmup_steps);
    const T bc1 = T(1) - std::pow(config_.beta1, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(config_.beta2, static_cast<T>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const T g = p.grad()[j];
        m_[i][j] = config_.beta1 * m_[i][j] + (T(1) - config_.beta1) * g;
        v_[i][j] = config_.beta2 * v_[i][j] + (T(1) - config_.beta2) * g * g;
        const T mhat = m_[i][j] / bc1;
        const T vhat = v_[i][j] / bc2;
        p.at(j) -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
      p.zero_grad();
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<TensorT<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamConfig<T> config_;
  std::size_t t_ = 0;
};

using Adam = AdamT<float>;

}  // namespace effir
