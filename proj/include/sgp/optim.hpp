#pragma once

#include <cmath>
#include <vector>

#include "sgp/nn/params.hpp"

namespace sgp {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed parameter list; moments are kept in double.
template <typename T = float>
class Adam {
 public:
  Adam() = default;
  Adam(nn::ParamList<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      if (!p.has_grad()) continue;
      const auto& g = p.impl()->grad;
      auto w = p.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = double(g[j]);
        m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj;
        if (cfg_.lr == 0) continue;
        w[j] = T(double(w[j]) - cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // L2 norm of each parameter's current gradient.
  std::vector<double> grad_norms() const {
    std::vector<double> out;
    for (const auto& p : params_) {
      double s = 0;
      for (auto g : p.tensor.grad()) s += double(g) * double(g);
      out.push_back(std::sqrt(s));
    }
    return out;
  }

  const nn::ParamList<T>& params() const { return params_; }
  std::size_t steps() const { return t_; }
  double lr() const { return cfg_.lr; }

 private:
  nn::ParamList<T> params_;
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace sgp
