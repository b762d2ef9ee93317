#pragma once

// Full pipeline: encoder -> pseudo-mask generation -> pseudo-mask attention -> final
// decoder, with the slice-memory bank for volumes.

#include <functional>
#include <string>
#include <vector>

#include "sgp/mem3d.hpp"
#include "sgp/nn/encoder.hpp"
#include "sgp/pma.hpp"
#include "sgp/pmg.hpp"

namespace sgp {

struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t classes = 1;
  std::size_t dim = 32;
  std::size_t blocks = 2;
  std::size_t patch = 4;
  std::size_t lora_rank = 4;
  double lora_alpha = 4.0;
  std::size_t skip_channels = 8;
  std::size_t up_channels = 8;
  bool pre_norm = true;
  bool memory_pre_norm = true;
  bool pmg = true;    // off: F~ = F_q, unit gate, full-image box
  bool mem3d = true;  // off: every slice sees the static supports only
  double box_tau = 0.5;
  std::size_t box_margin = 2;
};

template <typename T>
struct SliceResult {
  nn::ImageFeatures<T> feats;
  Tensor<T> f_tilde;        // [C x h x w]
  Tensor<T> f_hat;          // [C x h x w], averaged over classes
  Tensor<T> pseudo_logits;  // [K x H x W]; empty when PMG is off
  Tensor<T> pseudo;         // sigmoid(pseudo_logits)
  Tensor<T> final_logits;   // [K x H x W]
  Tensor<T> final;          // sigmoid(final_logits)
  std::vector<BBox> boxes;
  std::size_t fallback_boxes = 0;
};

template <typename T = float>
class Sam2Sgp {
 public:
  Sam2Sgp() = default;
  Sam2Sgp(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    nn::EncoderConfig ec;
    ec.in_channels = cfg.in_channels;
    ec.dim = cfg.dim;
    ec.blocks = cfg.blocks;
    ec.patch = cfg.patch;
    ec.skip_channels = cfg.skip_channels;
    ec.lora_rank = cfg.lora_rank;
    ec.lora_alpha = cfg.lora_alpha;
    ec.pre_norm = cfg.pre_norm;
    enc_ = nn::Encoder<T>(ec, rng.split(1));
    phi_ = nn::MaskDownsampler<T>(cfg.classes, cfg.dim, cfg.patch, rng.split(2));
    ma_ = pmg::MemoryAttention<T>(cfg.dim, cfg.memory_pre_norm, rng.split(3));
    pe_ = nn::PromptEncoder<T>(cfg.dim, rng.split(4));
    nn::DecoderConfig dc;
    dc.dim = cfg.dim;
    dc.classes = cfg.classes;
    dc.up_channels = cfg.up_channels;
    dc.skip_channels = cfg.skip_channels;
    dc.pre_norm = cfg.pre_norm;
    pseudo_dec_ = nn::MaskDecoder<T>(dc, rng.split(5));
    final_dec_ = nn::MaskDecoder<T>(dc, rng.split(6));
    pma_ = pma::MaskAttention<T>(cfg.dim, rng.split(7));
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }

  nn::ImageFeatures<T> encode(const Tensor<T>& image) const { return enc_.encode(image); }

  pmg::MemoryEntry<T> support_entry(const Tensor<T>& image, const Tensor<T>& mask) const {
    return pmg::encode_support_memory(phi_, enc_.encode(image).grid, mask);
  }

  SliceResult<T> forward_slice(const Tensor<T>& image, const pmg::SupportMemorySet<T>& mem) const {
    return forward_features(enc_.encode(image), mem);
  }

  SliceResult<T> forward_features(nn::ImageFeatures<T> feats, const pmg::SupportMemorySet<T>& mem) const {
    SliceResult<T> r;
    r.feats = std::move(feats);
    const auto& grid = r.feats.grid;
    const std::size_t K = cfg_.classes, H = r.feats.skip.dim(1), W = r.feats.skip.dim(2);
    const std::size_t h = grid.dim(1), w = grid.dim(2);
    if (cfg_.pmg) {
      r.f_tilde = ma_(mem, grid);
      r.pseudo_logits = pmg::pseudo_mask_logits(pseudo_dec_, pe_, r.f_tilde, r.feats.skip);
      r.pseudo = sigmoid(r.pseudo_logits);
    } else {
      r.f_tilde = grid;
    }
    std::vector<Tensor<T>> channels, hats;
    for (std::size_t k = 0; k < K; ++k) {
      Tensor<T> f_hat;
      BBox box{0, 0, H - 1, W - 1};
      if (cfg_.pmg) {
        auto pm = slice0(r.pseudo, k, k + 1);
        f_hat = pma_(r.f_tilde, pm);
        auto br = pma::bbox_from_mask(pm.data(), H, W, cfg_.box_tau, cfg_.box_margin);
        box = br.box;
        r.fallback_boxes += br.fallback;
      } else {
        f_hat = pma_.gated(r.f_tilde, Tensor<T>({1, h, w}, T(1)));
      }
      r.boxes.push_back(box);
      auto logits = final_dec_.decode(f_hat, r.feats.skip, pe_.box(box, H, W));
      channels.push_back(K == 1 ? logits : slice0(logits, k, k + 1));
      hats.push_back(f_hat);
    }
    r.final_logits = K == 1 ? channels[0] : concat0(channels);
    r.final = sigmoid(r.final_logits);
    r.f_hat = hats[0];
    for (std::size_t k = 1; k < K; ++k) r.f_hat = add(r.f_hat, hats[k]);
    if (K > 1) r.f_hat = scale(r.f_hat, T(1.0 / double(K)));
    return r;
  }

  // Ascending axial pass. Slice z sees the static supports plus the volumetric
  // memories of slices < z that survived eviction. `on_slice` receives each result
  // before the next slice runs (the loss can be taken there).
  void propagate(const Tensor<T>& volume, const std::vector<pmg::MemoryEntry<T>>& statics, std::size_t capacity,
                 const std::function<void(std::size_t, SliceResult<T>&)>& on_slice) const {
    if (volume.rank() != 4) throw ShapeError("propagate: expected [D x C x H x W], got " + shape_str(volume.dims()));
    const std::size_t D = volume.dim(0), st = volume.numel() / D;
    Shape sdims(volume.dims().begin() + 1, volume.dims().end());
    mem3d::MemoryBank<T> bank(capacity, statics);
    std::optional<pmg::MemoryEntry<T>> pending;
    for (std::size_t z = 0; z < D; ++z) {
      Tensor<T> img(sdims, std::vector<T>(volume.data().begin() + z * st, volume.data().begin() + (z + 1) * st));
      auto feats = enc_.encode(img);
      if (pending) {
        bank.push_evict(std::move(*pending), pmg::pooled(feats.grid));
        pending.reset();
      }
      auto r = forward_features(std::move(feats), bank.extended_memory());
      if (cfg_.mem3d && cfg_.pmg && capacity > 0) pending = mem3d::encode_volumetric(phi_, r.f_hat, r.final);
      on_slice(z, r);
    }
  }

  // Probabilities [D x K x H x W].
  Tensor<T> propagate_volume(const Tensor<T>& volume, const std::vector<pmg::MemoryEntry<T>>& statics,
                             std::size_t capacity) const {
    std::vector<T> out;
    Shape dims;
    propagate(volume, statics, capacity, [&](std::size_t, SliceResult<T>& r) {
      out.insert(out.end(), r.final.data().begin(), r.final.data().end());
      dims = r.final.dims();
    });
    dims.insert(dims.begin(), volume.dim(0));
    return Tensor<T>(dims, std::move(out));
  }

  // Pooled frozen-encoder embedding used for support selection.
  std::vector<double> selection_embedding(const Tensor<T>& image) const {
    NoGradGuard ng;
    auto& self = const_cast<Sam2Sgp&>(*this);
    self.enc_.set_adapters_enabled(false);
    auto e = pmg::pooled(enc_.encode(image).grid);
    self.enc_.set_adapters_enabled(true);
    return e;
  }

  nn::ParamList<T> params() const {
    nn::ParamList<T> ps;
    enc_.collect(ps, "encoder");
    phi_.collect(ps, "mask_downsampler");
    ma_.collect(ps, "memory_attention");
    pe_.collect(ps, "prompt_encoder");
    pseudo_dec_.collect(ps, "pseudo_decoder");
    pma_.collect(ps, "mask_attention");
    final_dec_.collect(ps, "final_decoder");
    return ps;
  }

  nn::ParamList<T> trainable_params() const {
    nn::ParamList<T> ps;
    for (auto& p : params())
      if (p.tensor.requires_grad()) ps.push_back(p);
    return ps;
  }

  nn::Encoder<T>& encoder() { return enc_; }
  const nn::Encoder<T>& encoder() const { return enc_; }
  nn::MaskDownsampler<T>& mask_downsampler() { return phi_; }
  pmg::MemoryAttention<T>& memory_attention() { return ma_; }
  nn::PromptEncoder<T>& prompt_encoder() { return pe_; }
  nn::MaskDecoder<T>& pseudo_decoder() { return pseudo_dec_; }
  nn::MaskDecoder<T>& final_decoder() { return final_dec_; }
  pma::MaskAttention<T>& mask_attention() { return pma_; }

 private:
  ModelConfig cfg_;
  nn::Encoder<T> enc_;
  nn::MaskDownsampler<T> phi_;
  pmg::MemoryAttention<T> ma_;
  nn::PromptEncoder<T> pe_;
  nn::MaskDecoder<T> pseudo_dec_, final_dec_;
  pma::MaskAttention<T> pma_;
};

// Dataset tensors are stored in float; double instances convert on the way in.
template <typename T>
Tensor<T> as(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return cast<T>(t);
  }
}

template <typename T>
pmg::EmbeddingIndex build_embedding_index(const Sam2Sgp<T>& model, const data::Dataset& ds) {
  pmg::EmbeddingIndex idx;
  idx.slices.resize(ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    for (std::size_t z = 0; z < s.depth(); ++z) idx.slices[i].push_back(model.selection_embedding(as<T>(s.image_slice(z))));
  }
  return idx;
}

}  // namespace sgp
