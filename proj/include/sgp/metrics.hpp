#pragma once

// Hard-mask overlap metrics at threshold 0.5.

#include <cstdint>
#include <span>
#include <vector>

#include "sgp/error.hpp"

namespace sgp {

struct OverlapCounts {
  std::uint64_t inter = 0, pred = 0, target = 0;

  void add(const OverlapCounts& o) {
    inter += o.inter;
    pred += o.pred;
    target += o.target;
  }
  std::uint64_t uni() const { return pred + target - inter; }
  // Both empty counts as a perfect match.
  double dice() const { return pred + target == 0 ? 1.0 : 2.0 * double(inter) / double(pred + target); }
  double iou() const { return uni() == 0 ? 1.0 : double(inter) / double(uni()); }
};

template <typename T, typename U>
OverlapCounts overlap(std::span<const T> prob, std::span<const U> target, double threshold = 0.5) {
  if (prob.size() != target.size()) throw ShapeError("overlap: prediction and target sizes differ");
  OverlapCounts c;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const bool p = double(prob[i]) >= threshold, t = double(target[i]) >= 0.5;
    c.inter += p && t;
    c.pred += p;
    c.target += t;
  }
  return c;
}

}  // namespace sgp
