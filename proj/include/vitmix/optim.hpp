// AdamW with decoupled weight decay and a single-cycle cosine schedule.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vitmix/tensor.hpp"

namespace vitmix {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2, one cycle.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max,
                        double lr_min = 0.0) {
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw ConfigError("cosine_lr: step " + std::to_string(step) +
                      " outside schedule horizon [0," + std::to_string(total_steps) + "]");
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <class S>
class AdamW {
public:
  AdamW() = default;
  explicit AdamW(std::vector<Tensor<S>*> params, AdamWConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params_[i]->numel()), S(0));
      v_[i].assign(static_cast<std::size_t>(params_[i]->numel()), S(0));
    }
  }

  // One update with learning rate lr_t. Decay is decoupled: it shrinks the
  // incoming parameter value independently of the adaptive step.
  void step(double lr_t) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S one_m_b1 = static_cast<S>(1.0 - cfg_.beta1);
    const S one_m_b2 = static_cast<S>(1.0 - cfg_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>& p = *params_[i];
      const auto n = static_cast<std::size_t>(p.numel());
      if (m_[i].size() != n)
        throw ShapeError("adamw: moment state does not match parameter shape");
      const std::vector<S> g = p.grad_or_zeros();
      S* pv = p.mutable_data();
      for (std::size_t j = 0; j < n; ++j) {
        m_[i][j] = b1 * m_[i][j] + one_m_b1 * g[j];
        v_[i][j] = b2 * v_[i][j] + one_m_b2 * g[j] * g[j];
        const double mhat = static_cast<double>(m_[i][j]) / bc1;
        const double vhat = static_cast<double>(v_[i][j]) / bc2;
        const double adaptive = lr_t * mhat / (std::sqrt(vhat) + cfg_.eps);
        const double decay = lr_t * cfg_.weight_decay * static_cast<double>(pv[j]);
        pv[j] = static_cast<S>(static_cast<double>(pv[j]) - adaptive - decay);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }
  const AdamWConfig& config() const { return cfg_; }

  std::vector<S>& moment1(std::size_t i) { return m_[i]; }
  std::vector<S>& moment2(std::size_t i) { return v_[i]; }
  std::size_t size() const { return params_.size(); }

private:
  std::vector<Tensor<S>*> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<S>> m_, v_;
  std::int64_t t_ = 0;
};

} // namespace vitmix
