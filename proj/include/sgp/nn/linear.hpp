#pragma once

#include <cmath>
#include <string>

#include "sgp/nn/params.hpp"
#include "sgp/ops.hpp"

namespace sgp::nn {

// Dense layer on row tokens: y = x W^T + b, W is [out x in].
template <typename T = float>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng rng, bool bias = true, bool trainable = true)
      : in_(in), out_(out) {
    weight_ = make_param<T>({out, in}, rng, 1.0 / std::sqrt(double(in)), trainable);
    if (bias) bias_ = make_const_param<T>({out}, T(0), trainable);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul_nt(x, weight_);
    return bias_.numel() ? add_bias_rows(y, bias_) : y;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    add_param(out, prefix, "weight", weight_);
    add_param(out, prefix, "bias", bias_);
  }

  void zero() {
    for (auto& v : weight_.mutable_data()) v = T(0);
    for (auto& v : bias_.mutable_data()) v = T(0);
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

// Frozen dense layer plus a trainable low-rank update:
//   y = x W^T + b + (alpha / r) (x A^T) B^T,  A: [r x in], B: [out x r], B starts at zero.
template <typename T = float>
class LoraLinear {
 public:
  LoraLinear() = default;
  LoraLinear(std::size_t in, std::size_t out, std::size_t rank, double alpha, Rng rng, bool bias = true)
      : in_(in), out_(out), rank_(rank), alpha_(alpha) {
    weight_ = make_param<T>({out, in}, rng, 1.0 / std::sqrt(double(in)), false);
    if (bias) bias_ = make_const_param<T>({out}, T(0), false);
    if (rank_ > 0) {
      Rng ar = rng.split(1);
      lora_a_ = make_param<T>({rank, in}, ar, 1.0 / std::sqrt(double(in)), true);
      lora_b_ = make_const_param<T>({out, rank}, T(0), true);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul_nt(x, weight_);
    if (bias_.numel()) y = add_bias_rows(y, bias_);
    if (rank_ == 0 || !enabled_) return y;
    auto low = matmul_nt(matmul_nt(x, lora_a_), lora_b_);
    return add(y, scale(low, T(alpha_ / double(rank_))));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    add_param(out, prefix, "weight", weight_);
    add_param(out, prefix, "bias", bias_);
    add_param(out, prefix, "lora_a", lora_a_);
    add_param(out, prefix, "lora_b", lora_b_);
  }

  // false routes around the adapter (base-model output).
  void set_adapter_enabled(bool on) { enabled_ = on; }
  bool adapter_enabled() const { return enabled_; }

  // Base weights become trainable, e.g. for auxiliary pretraining.
  void set_base_trainable(bool on) {
    weight_.set_requires_grad(on);
    bias_.set_requires_grad(on);
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& lora_a() { return lora_a_; }
  Tensor<T>& lora_b() { return lora_b_; }
  std::size_t rank() const { return rank_; }
  double alpha() const { return alpha_; }

 private:
  std::size_t in_ = 0, out_ = 0, rank_ = 0;
  double alpha_ = 1.0;
  bool enabled_ = true;
  Tensor<T> weight_, bias_, lora_a_, lora_b_;
};

// Fixed 2-D sinusoidal code for a normalized position (y, x) in [0, 1]^2; d must be a multiple of 4.
inline std::vector<double> sinusoid2d(double y, double x, std::size_t d) {
  std::vector<double> pe(d);
  const std::size_t nf = d / 4;
  for (std::size_t i = 0; i < nf; ++i) {
    const double f = 3.14159265358979323846 * std::pow(2.0, double(i) * 0.5);
    pe[4 * i + 0] = std::sin(f * y);
    pe[4 * i + 1] = std::cos(f * y);
    pe[4 * i + 2] = std::sin(f * x);
    pe[4 * i + 3] = std::cos(f * x);
  }
  return pe;
}

// Codes for the centres of an h x w token grid, row-major, [h*w x d].
template <typename T>
Tensor<T> grid_positions(std::size_t h, std::size_t w, std::size_t d) {
  std::vector<T> v;
  v.reserve(h * w * d);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      auto pe = sinusoid2d((double(i) + 0.5) / double(h), (double(j) + 0.5) / double(w), d);
      for (double p : pe) v.push_back(T(p));
    }
  return Tensor<T>({h * w, d}, std::move(v));
}

}  // namespace sgp::nn
