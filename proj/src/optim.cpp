#include "hwnas/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hwnas {

Sgd::Sgd(std::vector<Tensor> params, Real lr, Real momentum, Real weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  if (!(lr > 0)) throw std::invalid_argument("Sgd: learning rate must be positive");
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), Real(0));
}

void Sgd::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto v = p.values();
    auto g = p.grad();
    auto& vel = velocity_[k];
    for (std::size_t i = 0; i < v.size(); ++i) {
      const Real d = g[i] + weight_decay_ * v[i];
      vel[i] = momentum_ * vel[i] + d;
      v[i] -= lr_ * vel[i];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Tensor> params, Real lr, Real beta1, Real beta2, Real weight_decay, Real eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
  if (!(lr > 0)) throw std::invalid_argument("Adam: learning rate must be positive");
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), Real(0));
    v_.emplace_back(p.numel(), Real(0));
  }
}

void Adam::step() {
  ++t_;
  const Real c1 = Real(1) - std::pow(beta1_, static_cast<Real>(t_));
  const Real c2 = Real(1) - std::pow(beta2_, static_cast<Real>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto w = p.values();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const Real d = g[i] + weight_decay_ * w[i];
      m_[k][i] = beta1_ * m_[k][i] + (1 - beta1_) * d;
      v_[k][i] = beta2_ * v_[k][i] + (1 - beta2_) * d * d;
      w[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double ss = 0;
  for (const Tensor& p : params)
    if (p.has_grad())
      for (Real g : p.grad()) ss += static_cast<double>(g) * g;
  const double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0) {
    const Real s = static_cast<Real>(max_norm / norm);
    for (Tensor p : params)
      if (p.has_grad())
        for (Real& g : p.grad()) g *= s;
  }
  return norm;
}

double cosine_lr(double lr_max, double lr_min, int t, int total) {
  if (total <= 0) return lr_max;
  return lr_min + 0.5 * (lr_max - lr_min) * (1 + std::cos(std::numbers::pi * t / total));
}

}  // namespace hwnas
