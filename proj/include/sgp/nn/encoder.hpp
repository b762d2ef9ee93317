#pragma once

#include <string>
#include <vector>

#include "sgp/nn/attention.hpp"

namespace sgp::nn {

struct EncoderConfig {
  std::size_t in_channels = 1;
  std::size_t dim = 32;
  std::size_t blocks = 2;
  std::size_t patch = 4;
  std::size_t skip_channels = 8;
  std::size_t lora_rank = 4;
  double lora_alpha = 4.0;
  bool pre_norm = true;
};

template <typename T>
struct ImageFeatures {
  Tensor<T> grid;  // [C x H/p x W/p]
  Tensor<T> skip;  // [skip_channels x H x W], full-resolution stem features
};

// Patch-embedding transformer encoder. Base weights are frozen; only the LoRA
// factors inside the blocks train.
template <typename T = float>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng rng) : cfg_(cfg) {
    if (cfg.dim % 4 != 0) throw ConfigError("model.dim must be a multiple of 4");
    if (cfg.patch < 1) throw ConfigError("model.patch must be >= 1");
    const std::size_t k = patch_kernel();
    const double fan = double(cfg.in_channels * k * k);
    patch_w_ = make_param<T>({cfg.dim, cfg.in_channels, k, k}, rng.split(1), 1.0 / std::sqrt(fan), false);
    patch_b_ = make_const_param<T>({cfg.dim}, T(0), false);
    stem_w_ = make_param<T>({cfg.skip_channels, cfg.in_channels, 3, 3}, rng.split(2),
                            std::sqrt(2.0 / double(cfg.in_channels * 9)), false);
    stem_b_ = make_const_param<T>({cfg.skip_channels}, T(0), false);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      Rng br = rng.split(100 + b);
      Block blk;
      AttentionOptions opt;
      opt.residual = Residual::Input;
      opt.pre_norm = cfg.pre_norm;
      blk.attn = AttentionBlock<T, LoraLinear<T>>(cfg.dim, cfg.dim, opt,
                                                  lora_factory<T>(br.split(0), cfg.lora_rank, cfg.lora_alpha));
      blk.ln_gain = make_const_param<T>({cfg.dim}, T(1), false);
      blk.ln_bias = make_const_param<T>({cfg.dim}, T(0), false);
      blk.mlp_in = LoraLinear<T>(cfg.dim, 2 * cfg.dim, cfg.lora_rank, cfg.lora_alpha, br.split(1));
      blk.mlp_out = LoraLinear<T>(2 * cfg.dim, cfg.dim, cfg.lora_rank, cfg.lora_alpha, br.split(2));
      blocks_.push_back(std::move(blk));
    }
    freeze_attention_norms();
  }

  std::size_t patch_kernel() const { return cfg_.patch % 2 ? cfg_.patch : cfg_.patch + 1; }
  const EncoderConfig& config() const { return cfg_; }

  ImageFeatures<T> encode(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != cfg_.in_channels) {
      throw ShapeError("encode: expected image [" + std::to_string(cfg_.in_channels) + " x H x W], got " +
                       shape_str(image.dims()));
    }
    const std::size_t H = image.dim(1), W = image.dim(2), p = cfg_.patch;
    if (H % p || W % p || H < patch_kernel() || W < patch_kernel()) {
      auto near = [p](std::size_t v) {
        std::size_t lo = std::max<std::size_t>(p, v / p * p);
        return std::to_string(lo) + " or " + std::to_string(lo + p);
      };
      throw ShapeError("encode: image " + std::to_string(H) + "x" + std::to_string(W) +
                       " is not divisible by patch size " + std::to_string(p) + "; valid heights include " +
                       near(H) + ", valid widths include " + near(W));
    }
    const std::size_t h = H / p, w = W / p;
    ImageFeatures<T> out;
    out.skip = gelu(conv2d(image, stem_w_, stem_b_, 1));
    auto grid = conv2d(image, patch_w_, patch_b_, int(p));
    auto x = add(grid_to_tokens(grid), positions(h, w));
    for (const auto& b : blocks_) {
      x = b.attn.self_attention(x);
      auto hmid = layer_norm_rows(x, b.ln_gain, b.ln_bias);
      x = add(x, b.mlp_out(gelu(b.mlp_in(hmid))));
    }
    out.grid = tokens_to_grid(x, h, w);
    return out;
  }

  void set_adapters_enabled(bool on) {
    for (auto& b : blocks_) {
      for (auto* l : lora_layers(b)) l->set_adapter_enabled(on);
    }
  }

  // Unfreezes every base weight (auxiliary pretraining) or restores the frozen state.
  void set_base_trainable(bool on) {
    for (auto* t : {&patch_w_, &patch_b_, &stem_w_, &stem_b_}) t->set_requires_grad(on);
    for (auto& b : blocks_) {
      for (auto* l : lora_layers(b)) l->set_base_trainable(on);
      b.ln_gain.set_requires_grad(on);
      b.ln_bias.set_requires_grad(on);
    }
    freeze_attention_norms(on);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    add_param(out, prefix, "patch.weight", patch_w_);
    add_param(out, prefix, "patch.bias", patch_b_);
    add_param(out, prefix, "stem.weight", stem_w_);
    add_param(out, prefix, "stem.bias", stem_b_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      const std::string p = prefix + ".block" + std::to_string(i);
      b.attn.collect(out, p + ".attn");
      add_param(out, p, "ln.gain", b.ln_gain);
      add_param(out, p, "ln.bias", b.ln_bias);
      b.mlp_in.collect(out, p + ".mlp_in");
      b.mlp_out.collect(out, p + ".mlp_out");
    }
  }

  // Every LoRA layer, for tests and tooling.
  std::vector<LoraLinear<T>*> lora_layers() {
    std::vector<LoraLinear<T>*> all;
    for (auto& b : blocks_) {
      auto l = lora_layers(b);
      all.insert(all.end(), l.begin(), l.end());
    }
    return all;
  }

 private:
  struct Block {
    AttentionBlock<T, LoraLinear<T>> attn;
    Tensor<T> ln_gain, ln_bias;
    LoraLinear<T> mlp_in, mlp_out;
  };

  static std::vector<LoraLinear<T>*> lora_layers(Block& b) {
    return {&b.attn.q(), &b.attn.k(), &b.attn.v(), &b.attn.o(), &b.mlp_in, &b.mlp_out};
  }

  void freeze_attention_norms(bool trainable = false) {
    for (auto& b : blocks_) {
      ParamList<T> ps;
      b.attn.collect(ps, "");
      for (auto& p : ps) {
        if (p.name.find("ln_") != std::string::npos) p.tensor.set_requires_grad(trainable);
      }
    }
  }

  const Tensor<T>& positions(std::size_t h, std::size_t w) const {
    if (pos_.numel() == 0 || pos_h_ != h || pos_w_ != w) {
      pos_ = grid_positions<T>(h, w, cfg_.dim);
      pos_h_ = h;
      pos_w_ = w;
    }
    return pos_;
  }

  EncoderConfig cfg_;
  Tensor<T> patch_w_, patch_b_, stem_w_, stem_b_;
  std::vector<Block> blocks_;
  mutable Tensor<T> pos_;
  mutable std::size_t pos_h_ = 0, pos_w_ = 0;
};

}  // namespace sgp::nn
