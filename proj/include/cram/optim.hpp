#pragma once
// Adam with bias correction. One instance owns one parameter group; its
// moment buffers serialize into checkpoints. A NaN/Inf gradient aborts with
// the offending parameter named.

#include <cmath>
#include <string>
#include <vector>

#include "cram/tape.hpp"

namespace cram {

template <typename S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Parameter<S>*> params, double lr = 1e-4,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)),
        lr_(lr),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), S(0));
      v_.emplace_back(p->value.size(), S(0));
    }
  }

  long step_count() const { return step_; }
  const std::vector<Parameter<S>*>& params() const { return params_; }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter<S>& p = *params_[k];
      for (const S g : p.grad)
        if (!std::isfinite(g))
          throw NumericError("non-finite gradient in parameter group " +
                             p.name);
      std::vector<S> value(p.value.vec());
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        m[i] = static_cast<S>(beta1_ * m[i] + (1.0 - beta1_) * g);
        v[i] = static_cast<S>(beta2_ * v[i] + (1.0 - beta2_) * g * g);
        const double mhat = static_cast<double>(m[i]) / bc1;
        const double vhat = static_cast<double>(v[i]) / bc2;
        value[i] = static_cast<S>(value[i] -
                                  lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
      p.assign(Tensor<S>(p.value.shape(), std::move(value)));
    }
  }

  // Moment buffers exposed for checkpointing, keyed by parameter order.
  std::vector<S>& moment1(std::size_t k) { return m_[k]; }
  std::vector<S>& moment2(std::size_t k) { return v_[k]; }
  void set_step_count(long s) { step_ = s; }

 private:
  std::vector<Parameter<S>*> params_;
  std::vector<std::vector<S>> m_, v_;
  long step_ = 0;
  double lr_ = 1e-4, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

}  // namespace cram
