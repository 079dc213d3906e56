#pragma once

#include <cmath>
#include <vector>

#include "petseg/errors.hpp"
#include "petseg/nn/graph.hpp"

namespace petseg::nn {

// SGD with Nesterov momentum; weight decay enters the gradient as L2
// regularization before the momentum update (the torch-style formulation):
//   d   = g + wd * w
//   buf = mu * buf + d
//   w  -= lr * (d + mu * buf)     (nesterov)
//   w  -= lr * buf                (plain momentum)
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Parameter*> params, double momentum, double weight_decay,
               bool nesterov)
      : params_(std::move(params)),
        momentum_(momentum),
        weight_decay_(weight_decay),
        nesterov_(nesterov) {
    buffers_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i)
      buffers_[i].assign(params_[i]->value.data.size(), 0.0f);
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  void step(double lr) {
    const float mu = static_cast<float>(momentum_);
    const float wd = static_cast<float>(weight_decay_);
    const float flr = static_cast<float>(lr);
    for (size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      p.ensure_grad();
      std::vector<float>& buf = buffers_[i];
      for (size_t j = 0; j < buf.size(); ++j) {
        float d = p.grad.data[j] + wd * p.value.data[j];
        buf[j] = mu * buf[j] + d;
        if (nesterov_) d += mu * buf[j];
        else d = buf[j];
        p.value.data[j] -= flr * d;
      }
    }
  }

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<float>> buffers_;
  double momentum_;
  double weight_decay_;
  bool nesterov_;
};

}  // namespace petseg::nn
