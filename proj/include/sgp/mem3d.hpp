#pragma once

// Bounded slice-memory bank for axial propagation.

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sgp/pmg.hpp"

namespace sgp::mem3d {

template <typename T = float>
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(std::size_t capacity, std::vector<pmg::MemoryEntry<T>> static_entries)
      : capacity_(capacity), static_(std::move(static_entries)) {}

  std::size_t capacity() const { return capacity_; }
  const std::vector<pmg::MemoryEntry<T>>& entries() const { return entries_; }
  const std::vector<pmg::MemoryEntry<T>>& static_entries() const { return static_; }

  // Appends e; over capacity, drops the volumetric entry least similar to `current`
  // (oldest on ties). Returns the position the victim held, if any.
  std::optional<std::size_t> push_evict(pmg::MemoryEntry<T> e, const std::vector<double>& current) {
    if (e.source != pmg::Source::Volumetric) throw ContractError("push_evict: only volumetric entries enter the bank");
    entries_.push_back(std::move(e));
    if (entries_.size() <= capacity_) return std::nullopt;
    std::size_t victim = 0;
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const double s = pmg::cosine(entries_[i].key, current);
      if (s < lo) {
        lo = s;
        victim = i;
      }
    }
    entries_.erase(entries_.begin() + std::ptrdiff_t(victim));
    return victim;
  }

  std::optional<std::size_t> push_evict(pmg::MemoryEntry<T> e, const Tensor<T>& current) {
    return push_evict(std::move(e), pmg::pooled(current));
  }

  // Static entries followed by the volumetric ones, in insertion order.
  pmg::SupportMemorySet<T> extended_memory() const {
    pmg::SupportMemorySet<T> s;
    s.entries = static_;
    s.entries.insert(s.entries.end(), entries_.begin(), entries_.end());
    return s;
  }

 private:
  std::size_t capacity_ = 0;
  std::vector<pmg::MemoryEntry<T>> static_;
  std::vector<pmg::MemoryEntry<T>> entries_;
};

// M_v = phi(y_v) + F^_v, detached so stored memories never extend the tape.
template <typename T>
pmg::MemoryEntry<T> encode_volumetric(const nn::MaskDownsampler<T>& phi, const Tensor<T>& feat,
                                      const Tensor<T>& pred) {
  NoGradGuard ng;
  auto e = pmg::encode_support_memory(phi, feat.detach(), pred.detach(), pmg::Source::Volumetric);
  e.tokens = e.tokens.detach();
  return e;
}

}  // namespace sgp::mem3d
