#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace fmpl {

// Named parameter list shared by networks, checkpoints and trainers.
// Pointers stay valid for the lifetime of the owning params struct.
using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;

// Plain Adam for network training loops (the planning-side optimizers live
// in l2plan and are spec'd separately).
class AdamOpt {
 public:
  AdamOpt(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.push_back(Tensor::zeros(p->shape));
        v_.push_back(Tensor::zeros(p->shape));
      }
    }
    ++t_;
    double c1 = 1.0 - std::pow(beta1_, double(t_));
    double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      double* p = params[i]->mut();
      const double* g = grads[i].ptr();
      double* m = m_[i].mut();
      double* v = v_[i].mut();
      for (int64_t j = 0; j < params[i]->size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        p[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

inline double global_grad_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (int64_t i = 0; i < g.size(); ++i) s += g.at(i) * g.at(i);
  return std::sqrt(s);
}

inline void clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double n = global_grad_norm(grads);
  if (n <= max_norm || n == 0.0) return;
  double sc = max_norm / n;
  for (auto& g : grads)
    for (int64_t i = 0; i < g.size(); ++i) g.mut()[i] *= sc;
}

}  // namespace fmpl
