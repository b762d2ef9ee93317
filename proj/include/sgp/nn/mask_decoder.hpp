#pragma once

#include <string>

#include "sgp/nn/attention.hpp"

namespace sgp::nn {

struct DecoderConfig {
  std::size_t dim = 32;
  std::size_t classes = 1;
  std::size_t up_channels = 8;
  std::size_t skip_channels = 8;
  bool pre_norm = true;
};

// Two-way token/image attention followed by a two-stage head:
//   coarse logits at the token grid (hypernetwork dot product), bilinearly upsampled,
//   plus a full-resolution refinement fed by the encoder's stem features.
// Output: logits [classes x H x W], one channel per learned output token.
template <typename T = float>
class MaskDecoder {
 public:
  MaskDecoder() = default;
  MaskDecoder(const DecoderConfig& cfg, Rng rng) : cfg_(cfg) {
    const std::size_t d = cfg.dim, c = cfg.up_channels;
    out_tokens_ = make_param<T>({cfg.classes, d}, rng.split(0), 1.0, true);
    AttentionOptions opt;
    opt.residual = Residual::Input;
    opt.pre_norm = cfg.pre_norm;
    opt.cross = true;
    token_attn_ = AttentionBlock<T>(d, d, opt, dense_factory<T>(rng.split(1)));
    image_attn_ = AttentionBlock<T>(d, d, opt, dense_factory<T>(rng.split(2)));
    mlp_in_ = Linear<T>(d, 2 * d, rng.split(3));
    mlp_out_ = Linear<T>(2 * d, d, rng.split(4));
    proj_ = Linear<T>(d, c, rng.split(5));
    hyper_lo_ = Linear<T>(d, c, rng.split(6));
    hyper_hi_ = Linear<T>(d, c, rng.split(7));
    // Small heads keep the initial logits in the logistic's responsive range.
    for (auto* l : {&hyper_lo_, &hyper_hi_})
      for (auto& v : l->weight().mutable_data()) v *= T(0.1);
    skip_w_ = make_param<T>({c, cfg.skip_channels, 3, 3}, rng.split(8), std::sqrt(1.0 / double(cfg.skip_channels * 9)), true);
    skip_b_ = make_const_param<T>({c}, T(0), true);
    refine_w_ = make_param<T>({c, c, 3, 3}, rng.split(9), std::sqrt(2.0 / double(c * 9)), true);
    refine_b_ = make_const_param<T>({c}, T(0), true);
  }

  // grid [dim x h x w], skip [skip_channels x H x W], prompt [1 or 2 x dim].
  Tensor<T> decode(const Tensor<T>& grid, const Tensor<T>& skip, const Tensor<T>& prompt) const {
    if (prompt.rank() != 2 || prompt.dim(0) < 1 || prompt.dim(0) > 2 || prompt.dim(1) != cfg_.dim) {
      throw ContractError("decode: prompt must hold 1 or 2 tokens of width " + std::to_string(cfg_.dim) + ", got " +
                          shape_str(prompt.dims()));
    }
    if (grid.rank() != 3 || grid.dim(0) != cfg_.dim) {
      throw ShapeError("decode: features " + shape_str(grid.dims()) + " do not have " + std::to_string(cfg_.dim) +
                       " channels");
    }
    if (skip.rank() != 3 || skip.dim(0) != cfg_.skip_channels) {
      throw ShapeError("decode: skip features " + shape_str(skip.dims()) + " have the wrong channel count");
    }
    const std::size_t h = grid.dim(1), w = grid.dim(2), H = skip.dim(1), W = skip.dim(2);
    const std::size_t K = cfg_.classes, c = cfg_.up_channels;
    const auto& pe = positions(h, w);

    auto img = grid_to_tokens(grid);
    auto img_keys = add(img, pe);
    auto tokens = concat0<T>({out_tokens_, prompt});
    tokens = token_attn_.cross_attention(tokens, img_keys);
    tokens = add(tokens, mlp_out_(gelu(mlp_in_(tokens))));
    img = image_attn_.cross_attention(img_keys, tokens);

    auto lo = proj_(img);  // [h*w x c]
    auto out_tok = slice0(tokens, 0, K);
    auto coarse = reshape(matmul_nt(hyper_lo_(out_tok), lo), {K, h, w});

    auto lo_grid = tokens_to_grid(lo, h, w);
    auto hi = gelu(add(resize_bilinear(lo_grid, H, W), conv2d(skip, skip_w_, skip_b_, 1)));
    hi = gelu(conv2d(hi, refine_w_, refine_b_, 1));
    auto fine = reshape(matmul(hyper_hi_(out_tok), reshape(hi, {c, H * W})), {K, H, W});
    return add(resize_bilinear(coarse, H, W), fine);
  }

  // Zeroes both hypernetwork heads so every logit is exactly 0.
  void zero_head() {
    hyper_lo_.zero();
    hyper_hi_.zero();
  }

  const DecoderConfig& config() const { return cfg_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    add_param(out, prefix, "out_tokens", out_tokens_);
    token_attn_.collect(out, prefix + ".token_attn");
    image_attn_.collect(out, prefix + ".image_attn");
    mlp_in_.collect(out, prefix + ".mlp_in");
    mlp_out_.collect(out, prefix + ".mlp_out");
    proj_.collect(out, prefix + ".proj");
    hyper_lo_.collect(out, prefix + ".hyper_lo");
    hyper_hi_.collect(out, prefix + ".hyper_hi");
    add_param(out, prefix, "skip.weight", skip_w_);
    add_param(out, prefix, "skip.bias", skip_b_);
    add_param(out, prefix, "refine.weight", refine_w_);
    add_param(out, prefix, "refine.bias", refine_b_);
  }

 private:
  const Tensor<T>& positions(std::size_t h, std::size_t w) const {
    if (pos_.numel() == 0 || pos_h_ != h || pos_w_ != w) {
      pos_ = grid_positions<T>(h, w, cfg_.dim);
      pos_h_ = h;
      pos_w_ = w;
    }
    return pos_;
  }

  DecoderConfig cfg_;
  Tensor<T> out_tokens_;
  AttentionBlock<T> token_attn_, image_attn_;
  Linear<T> mlp_in_, mlp_out_, proj_, hyper_lo_, hyper_hi_;
  Tensor<T> skip_w_, skip_b_, refine_w_, refine_b_;
  mutable Tensor<T> pos_;
  mutable std::size_t pos_h_ = 0, pos_w_ = 0;
};

}  // namespace sgp::nn
