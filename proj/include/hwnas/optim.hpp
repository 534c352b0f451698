#pragma once

#include <vector>

#include "hwnas/tensor.hpp"

namespace hwnas {

// SGD with heavy-ball momentum; L2 weight decay is folded into the gradient.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, Real lr, Real momentum = Real(0.9), Real weight_decay = Real(0));

  void step();
  void zero_grad();
  void set_lr(Real lr) { lr_ = lr; }
  Real lr() const { return lr_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<Real>> velocity_;
  Real lr_, momentum_, weight_decay_;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, Real lr, Real beta1 = Real(0.9), Real beta2 = Real(0.999),
       Real weight_decay = Real(0), Real eps = Real(1e-8));

  void step();
  void zero_grad();
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<Real>> m_, v_;
  Real lr_, beta1_, beta2_, weight_decay_, eps_;
  long t_ = 0;
};

// Rescales the joint gradient of `params` to at most `max_norm`; returns the
// norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

// Cosine annealing from lr_max at t = 0 to lr_min at t = total.
double cosine_lr(double lr_max, double lr_min, int t, int total);

}  // namespace hwnas
