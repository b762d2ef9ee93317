#pragma once

// Segmentation losses: soft dice, binary cross entropy, Bernoulli KL and their weighted sum.

#include <algorithm>
#include <cmath>
#include <string>

#include "sgp/ops.hpp"

namespace sgp {

inline constexpr double kProbClamp = 1e-6;

struct LossConfig {
  double dice = 1.0;
  double ce = 1.0;
  double kl = 0.1;

  void validate() const {
    if (dice < 0 || ce < 0 || kl < 0) throw ConfigError("loss weights must be non-negative");
    if (dice == 0 && ce == 0 && kl == 0) throw ConfigError("at least one loss weight must be positive");
  }
};

namespace detail {

inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

template <typename T>
void require_pair(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.dims() != b.dims() || a.rank() < 1) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  }
}

}  // namespace detail

// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps) per class (leading axis), averaged.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps = 1e-6) {
  detail::require_pair(pred, target, "dice_loss");
  const std::size_t K = pred.dim(0), n = pred.numel() / K;
  std::vector<double> inter(K, 0), denom(K, 0);
  auto p = pred.data();
  auto t = target.data();
  double loss = 0;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      inter[k] += double(p[k * n + i]) * double(t[k * n + i]);
      denom[k] += double(p[k * n + i]) + double(t[k * n + i]);
    }
    loss += 1.0 - (2 * inter[k] + eps) / (denom[k] + eps);
  }
  auto pi = pred.impl();
  auto tv = target.vec();
  return Tensor<T>::make_result({}, {T(loss / double(K))}, "dice_loss", {pi},
                                [pi, tv, inter, denom, K, n, eps](const TensorImpl<T>& self) {
                                  auto& g = pi->grad_buffer();
                                  const double up = double(self.grad[0]) / double(K);
                                  for (std::size_t k = 0; k < K; ++k) {
                                    const double num = 2 * inter[k] + eps, den = denom[k] + eps;
                                    for (std::size_t i = 0; i < n; ++i) {
                                      const double d = -(2 * double(tv[k * n + i]) * den - num) / (den * den);
                                      g[k * n + i] += T(up * d);
                                    }
                                  }
                                });
}

// mean of -[t ln p + (1 - t) ln(1 - p)], p clamped to [1e-6, 1 - 1e-6].
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_pair(pred, target, "bce_loss");
  const std::size_t n = pred.numel();
  auto p = pred.data();
  auto t = target.data();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = detail::clamp_prob(double(p[i])), y = double(t[i]);
    acc -= y * std::log(q) + (1 - y) * std::log(1 - q);
  }
  auto pi = pred.impl();
  auto tv = target.vec();
  return Tensor<T>::make_result({}, {T(acc / double(n))}, "bce_loss", {pi}, [pi, tv, n](const TensorImpl<T>& self) {
    auto& g = pi->grad_buffer();
    const double up = double(self.grad[0]) / double(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double raw = double(pi->data[i]);
      if (raw < kProbClamp || raw > 1 - kProbClamp) continue;
      const double y = double(tv[i]);
      g[i] += T(up * (-y / raw + (1 - y) / (1 - raw)));
    }
  });
}

// Same quantity from logits, using log p = -softplus(-z) and log(1 - p) = -softplus(z),
// with z clamped to the logits of the probability clamp.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target) {
  detail::require_pair(logits, target, "bce_with_logits");
  const double zmax = std::log((1 - kProbClamp) / kProbClamp);
  const std::size_t n = logits.numel();
  auto z = logits.data();
  auto t = target.data();
  auto softplus = [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double zc = std::clamp(double(z[i]), -zmax, zmax), y = double(t[i]);
    acc += y * softplus(-zc) + (1 - y) * softplus(zc);
  }
  auto zi = logits.impl();
  auto tv = target.vec();
  return Tensor<T>::make_result({}, {T(acc / double(n))}, "bce_with_logits", {zi},
                                [zi, tv, n, zmax](const TensorImpl<T>& self) {
                                  auto& g = zi->grad_buffer();
                                  const double up = double(self.grad[0]) / double(n);
                                  for (std::size_t i = 0; i < n; ++i) {
                                    const double zr = double(zi->data[i]);
                                    if (zr < -zmax || zr > zmax) continue;
                                    const double p = 1 / (1 + std::exp(-zr));
                                    g[i] += T(up * (p - double(tv[i])));
                                  }
                                });
}

// mean Bernoulli KL(final || pseudo); `final` is a constant target (no gradient).
template <typename T>
Tensor<T> kl_loss(const Tensor<T>& pseudo, const Tensor<T>& final) {
  detail::require_pair(pseudo, final, "kl_loss");
  const std::size_t n = pseudo.numel();
  auto q = pseudo.data();
  auto f = final.data();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = detail::clamp_prob(double(f[i])), b = detail::clamp_prob(double(q[i]));
    acc += a * std::log(a / b) + (1 - a) * std::log((1 - a) / (1 - b));
  }
  auto qi = pseudo.impl();
  auto fv = final.vec();
  return Tensor<T>::make_result({}, {T(acc / double(n))}, "kl_loss", {qi}, [qi, fv, n](const TensorImpl<T>& self) {
    auto& g = qi->grad_buffer();
    const double up = double(self.grad[0]) / double(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double raw = double(qi->data[i]);
      if (raw < kProbClamp || raw > 1 - kProbClamp) continue;
      const double a = detail::clamp_prob(double(fv[i]));
      g[i] += T(up * (-a / raw + (1 - a) / (1 - raw)));
    }
  });
}

template <typename T>
struct LossParts {
  Tensor<T> total;
  double dice = 0, ce = 0, kl = 0;
};

// lambda_dice * dice(pred, y) + lambda_ce * bce(pred, y) + lambda_kl * KL(pred || pseudo).
// `pseudo` may be empty (no pseudo-mask branch): the KL term is then absent.
template <typename T>
LossParts<T> total_loss(const Tensor<T>& pred, const Tensor<T>& pseudo, const Tensor<T>& target,
                        const LossConfig& cfg) {
  LossParts<T> out;
  std::vector<std::pair<double, Tensor<T>>> terms;
  auto d = dice_loss(pred, target);
  auto c = bce_loss(pred, target);
  out.dice = double(d.item());
  out.ce = double(c.item());
  terms.push_back({cfg.dice, d});
  terms.push_back({cfg.ce, c});
  if (pseudo.numel()) {
    auto k = kl_loss(pseudo, pred.detach());
    out.kl = double(k.item());
    terms.push_back({cfg.kl, k});
  }
  Tensor<T> total;
  for (auto& [w, t] : terms) {
    if (w == 0) continue;
    auto term = w == 1 ? t : scale(t, T(w));
    total = total.numel() ? add(total, term) : term;
  }
  out.total = total.numel() ? total : Tensor<T>::scalar(T(0));
  return out;
}

}  // namespace sgp
