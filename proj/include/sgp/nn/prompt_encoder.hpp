#pragma once

#include <string>

#include "sgp/nn/linear.hpp"

namespace sgp {

// Inclusive pixel box: 0 <= r0 <= r1 < H, 0 <= c0 <= c1 < W.
struct BBox {
  std::size_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  bool operator==(const BBox&) const = default;
};

}  // namespace sgp

namespace sgp::nn {

// PE(None) is one learned token; PE(box) is two tokens, a learned corner code
// plus the fixed sinusoid of the corner's pixel centre.
template <typename T = float>
class PromptEncoder {
 public:
  PromptEncoder() = default;
  PromptEncoder(std::size_t dim, Rng rng) : dim_(dim) {
    none_ = make_param<T>({1, dim}, rng.split(0), 1.0, true);
    corners_ = make_param<T>({2, dim}, rng.split(1), 1.0, true);
  }

  Tensor<T> none() const { return none_; }

  Tensor<T> box(const BBox& b, std::size_t H, std::size_t W) const {
    if (b.r0 > b.r1 || b.c0 > b.c1 || b.r1 >= H || b.c1 >= W) {
      throw ContractError("prompt box outside a " + std::to_string(H) + "x" + std::to_string(W) + " image");
    }
    auto a = sinusoid2d((double(b.r0) + 0.5) / double(H), (double(b.c0) + 0.5) / double(W), dim_);
    auto z = sinusoid2d((double(b.r1) + 0.5) / double(H), (double(b.c1) + 0.5) / double(W), dim_);
    std::vector<T> pe;
    for (double v : a) pe.push_back(T(v));
    for (double v : z) pe.push_back(T(v));
    return add(corners_, Tensor<T>({2, dim_}, std::move(pe)));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    add_param(out, prefix, "none", none_);
    add_param(out, prefix, "corners", corners_);
  }

 private:
  std::size_t dim_ = 0;
  Tensor<T> none_, corners_;
};

}  // namespace sgp::nn
