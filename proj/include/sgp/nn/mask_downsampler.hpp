#pragma once

#include <string>
#include <vector>

#include "sgp/nn/params.hpp"
#include "sgp/ops.hpp"

namespace sgp::nn {

// Maps a [K_cls x H x W] soft mask to the encoder grid [C x H/p x W/p]:
// one stride-2 3x3 conv per factor of two in p (a single stride-p conv otherwise),
// GELU between stages, then a 1x1 projection to C channels.
template <typename T = float>
class MaskDownsampler {
 public:
  MaskDownsampler() = default;
  MaskDownsampler(std::size_t mask_channels, std::size_t dim, std::size_t patch, Rng rng) : patch_(patch) {
    std::vector<std::pair<std::size_t, int>> stages;  // (kernel, stride)
    std::size_t q = patch;
    while (q > 1 && q % 2 == 0) {
      stages.push_back({3, 2});
      q /= 2;
    }
    if (q != 1) {
      stages.clear();
      stages.push_back({patch % 2 ? patch : patch + 1, int(patch)});
    }
    std::size_t cin = mask_channels;
    std::size_t width = 8;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto [k, s] = stages[i];
      Layer l;
      l.stride = s;
      l.weight = make_param<T>({width, cin, k, k}, rng.split(i), std::sqrt(2.0 / double(cin * k * k)), true);
      l.bias = make_const_param<T>({width}, T(0), true);
      layers_.push_back(std::move(l));
      cin = width;
      width = std::min<std::size_t>(width * 2, dim);
    }
    Layer proj;
    proj.stride = 1;
    proj.weight = make_param<T>({dim, cin, 1, 1}, rng.split(99), 1.0 / std::sqrt(double(cin)), true);
    proj.bias = make_const_param<T>({dim}, T(0), true);
    layers_.push_back(std::move(proj));
  }

  Tensor<T> operator()(const Tensor<T>& mask) const {
    Tensor<T> x = mask;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = conv2d(x, layers_[i].weight, layers_[i].bias, layers_[i].stride);
      if (i + 1 < layers_.size()) x = gelu(x);
    }
    return x;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      add_param(out, prefix, "conv" + std::to_string(i) + ".weight", layers_[i].weight);
      add_param(out, prefix, "conv" + std::to_string(i) + ".bias", layers_[i].bias);
    }
  }

  void zero_biases() {
    for (auto& l : layers_)
      for (auto& v : l.bias.mutable_data()) v = T(0);
  }

 private:
  struct Layer {
    Tensor<T> weight, bias;
    int stride = 1;
  };
  std::size_t patch_ = 4;
  std::vector<Layer> layers_;
};

}  // namespace sgp::nn
