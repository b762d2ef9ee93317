#pragma once

// Pseudo-mask generation: support memories, memory attention, prompt-free decoding
// and support-set selection.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "sgp/data.hpp"
#include "sgp/nn/attention.hpp"
#include "sgp/nn/mask_decoder.hpp"
#include "sgp/nn/mask_downsampler.hpp"
#include "sgp/nn/prompt_encoder.hpp"

namespace sgp::pmg {

enum class Source { Support, Volumetric };

template <typename T = float>
struct MemoryEntry {
  Tensor<T> tokens;  // [C x h x w]
  Source source = Source::Support;
  std::vector<double> key;  // spatial mean of tokens, length C
};

template <typename T = float>
struct SupportMemorySet {
  std::vector<MemoryEntry<T>> entries;

  bool empty() const { return entries.empty(); }
  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.tokens.dim(1) * e.tokens.dim(2);
    return n;
  }
  // All entries as one [sum(h*w) x C] token matrix, in entry order.
  Tensor<T> tokens() const {
    if (entries.empty()) {
      throw ContractError("support memory is empty; configure at least one support sample (support.k >= 1)");
    }
    std::vector<Tensor<T>> parts;
    for (const auto& e : entries) parts.push_back(grid_to_tokens(e.tokens));
    return concat0(parts);
  }
};

// Per-channel spatial mean of a [C x h x w] grid.
template <typename T>
std::vector<double> pooled(const Tensor<T>& grid) {
  if (grid.rank() != 3) throw ShapeError("pooled: expected a [C x h x w] grid, got " + shape_str(grid.dims()));
  const std::size_t C = grid.dim(0), n = grid.dim(1) * grid.dim(2);
  std::vector<double> out(C, 0.0);
  auto d = grid.data();
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += double(d[c * n + i]);
    out[c] = acc / double(n);
  }
  return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("cosine: vectors differ in length");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

template <typename T>
MemoryEntry<T> make_entry(Tensor<T> tokens, Source source) {
  MemoryEntry<T> e;
  e.key = pooled(tokens);
  e.tokens = std::move(tokens);
  e.source = source;
  return e;
}

// M = phi(mask) + F.
template <typename T>
MemoryEntry<T> encode_support_memory(const nn::MaskDownsampler<T>& phi, const Tensor<T>& feat, const Tensor<T>& mask,
                                     Source source = Source::Support) {
  auto m = phi(mask);
  if (m.dims() != feat.dims()) {
    throw ContractError("encode_support_memory: downsampled mask " + shape_str(m.dims()) +
                        " does not match features " + shape_str(feat.dims()));
  }
  return make_entry(add(m, feat), source);
}

// F~ = CA(SA(F_q), [M_1, ..., M_n]) with queries from the query image.
template <typename T = float>
class MemoryAttention {
 public:
  MemoryAttention() = default;
  MemoryAttention(std::size_t dim, bool pre_norm, Rng rng) {
    nn::AttentionOptions sa;
    sa.pre_norm = pre_norm;
    nn::AttentionOptions ca = sa;
    ca.cross = true;
    self_ = nn::AttentionBlock<T>(dim, dim, sa, nn::dense_factory<T>(rng.split(0)));
    cross_ = nn::AttentionBlock<T>(dim, dim, ca, nn::dense_factory<T>(rng.split(1)));
  }

  Tensor<T> operator()(const SupportMemorySet<T>& mem, const Tensor<T>& f_q) const {
    if (mem.empty()) {
      throw ContractError("memory_attend: no memory entries; configure at least one support sample (support.k >= 1)");
    }
    auto x = self_.self_attention(grid_to_tokens(f_q));
    x = cross_.cross_attention(x, mem.tokens());
    return tokens_to_grid(x, f_q.dim(1), f_q.dim(2));
  }

  void collect(nn::ParamList<T>& out, const std::string& prefix) const {
    self_.collect(out, prefix + ".self");
    cross_.collect(out, prefix + ".cross");
  }

  nn::AttentionBlock<T>& self_block() { return self_; }
  nn::AttentionBlock<T>& cross_block() { return cross_; }

 private:
  nn::AttentionBlock<T> self_, cross_;
};

// Prompt-free decode: logits [K_cls x H x W].
template <typename T>
Tensor<T> pseudo_mask_logits(const nn::MaskDecoder<T>& dec, const nn::PromptEncoder<T>& pe, const Tensor<T>& f_tilde,
                             const Tensor<T>& skip) {
  return dec.decode(f_tilde, skip, pe.none());
}

template <typename T>
Tensor<T> generate_pseudo_mask(const nn::MaskDecoder<T>& dec, const nn::PromptEncoder<T>& pe,
                               const Tensor<T>& f_tilde, const Tensor<T>& skip) {
  return sigmoid(pseudo_mask_logits(dec, pe, f_tilde, skip));
}

// Indices of the K pool entries with the highest cosine score; ties prefer the lower index.
inline std::vector<std::size_t> top_k_cosine(const std::vector<double>& query,
                                             const std::vector<std::vector<double>>& pool, std::size_t K) {
  if (K > pool.size()) {
    throw ConfigError("support.k = " + std::to_string(K) + " exceeds the support pool of " +
                      std::to_string(pool.size()) + " candidates");
  }
  std::vector<double> score(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) score[i] = cosine(query, pool[i]);
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  idx.resize(K);
  return idx;
}

// Pooled embeddings of every slice of every sample, indexed [sample][slice].
struct EmbeddingIndex {
  std::vector<std::vector<std::vector<double>>> slices;

  std::vector<double> volume_mean(std::size_t sample) const {
    const auto& s = slices.at(sample);
    std::vector<double> m(s.at(0).size(), 0.0);
    for (const auto& v : s)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += v[i];
    for (auto& x : m) x /= double(s.size());
    return m;
  }
};

// Chooses the K support slices most similar to the query (its mean slice embedding
// for volumes). A query never appears in its own support list. When the dataset
// duplicates supports into the query set, a support-pool query takes the K best of
// the remaining candidates (fewer if the pool runs short), and supports itself only
// when it is the whole pool.
inline data::Episode build_episode(std::size_t query_idx, const data::Dataset& ds, std::size_t K,
                                   const EmbeddingIndex& emb) {
  if (query_idx >= ds.samples.size()) throw ConfigError("build_episode: query index out of range");
  std::vector<data::SliceRef> cands;
  std::vector<std::vector<double>> pool;
  auto gather = [&](bool allow_self) {
    for (auto s : ds.support) {
      if (s == query_idx && !allow_self) continue;
      for (std::size_t z = 0; z < emb.slices.at(s).size(); ++z) {
        cands.push_back({s, z});
        pool.push_back(emb.slices[s][z]);
      }
    }
  };
  gather(false);
  if (ds.duplicated_support) {
    if (pool.empty()) gather(true);
    K = std::min(K, pool.size());
  }
  data::Episode ep;
  ep.query = query_idx;
  for (auto i : top_k_cosine(emb.volume_mean(query_idx), pool, K)) ep.support.push_back(cands[i]);
  return ep;
}

}  // namespace sgp::pmg
