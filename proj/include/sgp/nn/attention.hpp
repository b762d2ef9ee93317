#pragma once

#include <cmath>
#include <string>

#include "sgp/nn/linear.hpp"
#include "sgp/ops.hpp"

namespace sgp::nn {

// Which tensor is added back after the attention term.
//   Input: out = W_O softmax(QK^T/sqrt(d)) V + x      (default)
//   Value: out = W_O softmax(QK^T/sqrt(d)) V + V      (printed form; needs d == d_model)
enum class Residual { Input, Value };

inline constexpr Residual default_residual() {
#if defined(SGP_LITERAL_V_RESIDUAL) && SGP_LITERAL_V_RESIDUAL
  return Residual::Value;
#else
  return Residual::Input;
#endif
}

struct AttentionOptions {
  Residual residual = default_residual();
  bool pre_norm = true;
  bool cross = false;  // memory gets its own norm
};

// Single-head attention with projections of type Proj (Linear or LoraLinear).
template <typename T = float, typename Proj = Linear<T>>
class AttentionBlock {
 public:
  AttentionBlock() = default;

  template <typename MakeProj>
  AttentionBlock(std::size_t d_model, std::size_t d, AttentionOptions opt, MakeProj&& make)
      : d_model_(d_model), d_(d), opt_(opt) {
    if (d < 1) throw ContractError("attention head width must be >= 1");
    if (opt.residual == Residual::Value && d != d_model) {
      throw ContractError("value residual needs head width equal to model width");
    }
    wq_ = make(d_model, d, 0);
    wk_ = make(d_model, d, 1);
    wv_ = make(d_model, d, 2);
    wo_ = make(d, d_model, 3);
    if (opt.pre_norm) {
      ln_q_gain_ = make_const_param<T>({d_model}, T(1), true);
      ln_q_bias_ = make_const_param<T>({d_model}, T(0), true);
      if (opt.cross) {
        ln_m_gain_ = make_const_param<T>({d_model}, T(1), true);
        ln_m_bias_ = make_const_param<T>({d_model}, T(0), true);
      }
    }
  }

  Tensor<T> self_attention(const Tensor<T>& x) const {
    auto h = opt_.pre_norm ? layer_norm_rows(x, ln_q_gain_, ln_q_bias_) : x;
    auto v = wv_(h);
    auto attn = attend(wq_(h), wk_(h), v);
    return add(wo_(attn), opt_.residual == Residual::Input ? x : v);
  }

  // Queries keep their token count; keys and values come from memory.
  Tensor<T> cross_attention(const Tensor<T>& queries, const Tensor<T>& memory) const {
    if (memory.rank() != 2 || memory.dim(0) == 0) {
      throw ContractError("cross_attention: memory holds no tokens; configure at least one support sample");
    }
    auto hq = opt_.pre_norm ? layer_norm_rows(queries, ln_q_gain_, ln_q_bias_) : queries;
    if (opt_.pre_norm && !opt_.cross) throw ContractError("cross_attention on a block built for self-attention");
    auto hm = opt_.pre_norm ? layer_norm_rows(memory, ln_m_gain_, ln_m_bias_) : memory;
    auto v = wv_(hm);
    auto attn = attend(wq_(hq), wk_(hm), v);
    if (opt_.residual == Residual::Value) {
      if (memory.dim(0) != queries.dim(0)) {
        throw ContractError("cross_attention: value residual needs as many memory tokens as queries");
      }
      return add(wo_(attn), v);
    }
    return add(wo_(attn), queries);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    wq_.collect(out, prefix + ".q");
    wk_.collect(out, prefix + ".k");
    wv_.collect(out, prefix + ".v");
    wo_.collect(out, prefix + ".o");
    add_param(out, prefix, "ln_q.gain", ln_q_gain_);
    add_param(out, prefix, "ln_q.bias", ln_q_bias_);
    add_param(out, prefix, "ln_m.gain", ln_m_gain_);
    add_param(out, prefix, "ln_m.bias", ln_m_bias_);
  }

  Proj& q() { return wq_; }
  Proj& k() { return wk_; }
  Proj& v() { return wv_; }
  Proj& o() { return wo_; }
  const AttentionOptions& options() const { return opt_; }
  std::size_t head_width() const { return d_; }

 private:
  Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) const {
    auto scores = scale(matmul_nt(q, k), T(1.0 / std::sqrt(double(d_))));
    return matmul(softmax_rows(scores), v);
  }

  std::size_t d_model_ = 0, d_ = 0;
  AttentionOptions opt_;
  Proj wq_, wk_, wv_, wo_;
  Tensor<T> ln_q_gain_, ln_q_bias_, ln_m_gain_, ln_m_bias_;
};

template <typename T>
auto dense_factory(Rng rng, bool bias = true) {
  return [rng, bias](std::size_t in, std::size_t out, std::uint64_t slot) {
    return Linear<T>(in, out, rng.split(slot), bias);
  };
}

template <typename T>
auto lora_factory(Rng rng, std::size_t rank, double alpha, bool bias = true) {
  return [rng, rank, alpha, bias](std::size_t in, std::size_t out, std::uint64_t slot) {
    return LoraLinear<T>(in, out, rank, alpha, rng.split(slot), bias);
  };
}

}  // namespace sgp::nn
