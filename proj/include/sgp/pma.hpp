#pragma once

// Pseudo-mask attention: box prompt from the pseudo-mask, gated self-attention.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "sgp/nn/linear.hpp"
#include "sgp/nn/prompt_encoder.hpp"
#include "sgp/ops.hpp"

namespace sgp::pma {

struct BoxResult {
  BBox box;
  bool fallback = false;  // nothing reached tau; box covers the whole image
};

// Tightest box around {m >= tau}, grown by `margin` pixels and clamped to the image.
template <typename T>
BoxResult bbox_from_mask(std::span<const T> m, std::size_t H, std::size_t W, double tau = 0.5,
                         std::size_t margin = 2) {
  if (m.size() != H * W) throw ShapeError("bbox_from_mask: map size does not match " + std::to_string(H) + "x" + std::to_string(W));
  if (!(tau > 0 && tau < 1)) throw ContractError("bbox_from_mask: tau must lie in (0, 1)");
  std::size_t r0 = H, c0 = W, r1 = 0, c1 = 0;
  bool any = false;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      if (double(m[r * W + c]) >= tau) {
        any = true;
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
    }
  if (!any) return {BBox{0, 0, H - 1, W - 1}, true};
  BoxResult out;
  out.box.r0 = r0 > margin ? r0 - margin : 0;
  out.box.c0 = c0 > margin ? c0 - margin : 0;
  out.box.r1 = std::min(H - 1, r1 + margin);
  out.box.c1 = std::min(W - 1, c1 + margin);
  return out;
}

// F^ = g (.) softmax(QK^T/sqrt(d)) V + F~, g the pseudo-mask resized to the token grid.
// Q, K, V are projected from F~; there is no output projection and no normalization.
template <typename T = float>
class MaskAttention {
 public:
  MaskAttention() = default;
  MaskAttention(std::size_t dim, Rng rng) : d_(dim) {
    wq_ = nn::Linear<T>(dim, dim, rng.split(0));
    wk_ = nn::Linear<T>(dim, dim, rng.split(1));
    wv_ = nn::Linear<T>(dim, dim, rng.split(2));
  }

  // f_tilde [C x h x w]; pm [H x W] or [1 x H x W] probabilities.
  Tensor<T> operator()(const Tensor<T>& f_tilde, const Tensor<T>& pm) const {
    const std::size_t h = f_tilde.dim(1), w = f_tilde.dim(2);
    Tensor<T> pm3 = pm.rank() == 2 ? reshape(pm, {1, pm.dim(0), pm.dim(1)}) : pm;
    if (pm3.rank() != 3 || pm3.dim(0) != 1) throw ShapeError("mask_attention: gate must be one channel, got " + shape_str(pm.dims()));
    auto gate = resize_bilinear(pm3, h, w);
    return gated(f_tilde, gate);
  }

  // Gate already at the token grid, [1 x h x w] (any shape with h*w elements).
  Tensor<T> gated(const Tensor<T>& f_tilde, const Tensor<T>& gate) const {
    const std::size_t h = f_tilde.dim(1), w = f_tilde.dim(2);
    auto x = grid_to_tokens(f_tilde);
    auto scores = scale(matmul_nt(wq_(x), wk_(x)), T(1.0 / std::sqrt(double(d_))));
    auto attn = matmul(softmax_rows(scores), wv_(x));
    return add(tokens_to_grid(scale_rows(attn, gate), h, w), f_tilde);
  }

  void collect(nn::ParamList<T>& out, const std::string& prefix) const {
    wq_.collect(out, prefix + ".q");
    wk_.collect(out, prefix + ".k");
    wv_.collect(out, prefix + ".v");
  }

  nn::Linear<T>& q() { return wq_; }
  nn::Linear<T>& k() { return wk_; }
  nn::Linear<T>& v() { return wv_; }

 private:
  std::size_t d_ = 0;
  nn::Linear<T> wq_, wk_, wv_;
};

}  // namespace sgp::pma
