#include <gtest/gtest.h>

#include "oracle.hpp"
#include "sgp/mem3d.hpp"
#include "sgp/model.hpp"

using namespace sgp;

namespace {

// A 1x1 token grid, so the entry key is the vector itself.
pmg::MemoryEntry<double> vol_entry(const std::vector<double>& v) {
  return pmg::make_entry(Tensor<double>({v.size(), 1, 1}, v), pmg::Source::Volumetric);
}

pmg::MemoryEntry<double> sup_entry(const std::vector<double>& v) {
  return pmg::make_entry(Tensor<double>({v.size(), 1, 1}, v), pmg::Source::Support);
}

ModelConfig tiny() {
  ModelConfig c;
  c.dim = 8;
  c.blocks = 1;
  c.patch = 4;
  c.lora_rank = 2;
  c.lora_alpha = 2.0;
  c.skip_channels = 4;
  c.up_channels = 4;
  return c;
}

}  // namespace

TEST(EncodeVolumetric, ZeroPredictionWithZeroBiasIsFeature) {
  nn::MaskDownsampler<float> phi(1, 8, 4, Rng(3));
  phi.zero_biases();
  Rng rng(4);
  auto feat = oracle::randn<float>({8, 4, 4}, rng);
  auto e = mem3d::encode_volumetric(phi, feat, Tensor<float>({1, 16, 16}));
  EXPECT_EQ(e.source, pmg::Source::Volumetric);
  EXPECT_EQ(e.tokens.vec(), feat.vec());
  EXPECT_EQ(e.key, pmg::pooled(feat));
}

TEST(EncodeVolumetric, DeterministicAndMatchesSupportEncodingButForTag) {
  nn::MaskDownsampler<float> phi(1, 8, 4, Rng(5));
  Rng rng(6);
  auto feat = oracle::randn<float>({8, 4, 4}, rng);
  auto pred = oracle::uniform<float>({1, 16, 16}, rng, 0.0, 1.0);
  auto a = mem3d::encode_volumetric(phi, feat, pred);
  auto b = mem3d::encode_volumetric(phi, feat, pred);
  auto s = pmg::encode_support_memory(phi, feat, pred);
  EXPECT_EQ(a.tokens.vec(), b.tokens.vec());
  EXPECT_EQ(a.key, b.key);
  EXPECT_EQ(a.tokens.vec(), s.tokens.vec());
  EXPECT_EQ(a.key, s.key);
  EXPECT_EQ(s.source, pmg::Source::Support);
  EXPECT_EQ(a.source, pmg::Source::Volumetric);
}

TEST(EncodeVolumetric, EntryIsDetached) {
  nn::MaskDownsampler<double> phi(1, 8, 4, Rng(7));
  Rng rng(8);
  auto feat = oracle::randn<double>({8, 4, 4}, rng);
  feat.set_requires_grad(true);
  auto e = mem3d::encode_volumetric(phi, feat, Tensor<double>({1, 16, 16}, 0.5));
  EXPECT_FALSE(e.tokens.requires_grad());
}

TEST(MemoryBank, EvictsLeastSimilar) {
  mem3d::MemoryBank<double> bank(2, {});
  // Cosine to current (1, 0): 0.9 and 0.1.
  const double s9 = std::sqrt(1 - 0.81), s1 = std::sqrt(1 - 0.01);
  EXPECT_FALSE(bank.push_evict(vol_entry({0.9, s9}), std::vector<double>{1, 0}));
  EXPECT_FALSE(bank.push_evict(vol_entry({0.1, s1}), std::vector<double>{1, 0}));
  auto victim = bank.push_evict(vol_entry({0.5, std::sqrt(0.75)}), std::vector<double>{1, 0});
  ASSERT_TRUE(victim);
  EXPECT_EQ(*victim, 1u);
  ASSERT_EQ(bank.entries().size(), 2u);
  EXPECT_DOUBLE_EQ(bank.entries()[0].key[0], 0.9);
  EXPECT_DOUBLE_EQ(bank.entries()[1].key[0], 0.5);
}

TEST(MemoryBank, NoEvictionBelowCapacity) {
  mem3d::MemoryBank<double> bank(3, {});
  for (int i = 0; i < 3; ++i) EXPECT_FALSE(bank.push_evict(vol_entry({double(i), 1}), std::vector<double>{1, 0}));
  EXPECT_EQ(bank.entries().size(), 3u);
}

TEST(MemoryBank, TiesEvictOldest) {
  mem3d::MemoryBank<double> bank(2, {});
  bank.push_evict(vol_entry({1, 1}), std::vector<double>{1, 0});
  bank.push_evict(vol_entry({2, 2}), std::vector<double>{1, 0});
  auto victim = bank.push_evict(vol_entry({3, 3}), std::vector<double>{1, 0});
  ASSERT_TRUE(victim);
  EXPECT_EQ(*victim, 0u);
  EXPECT_DOUBLE_EQ(bank.entries()[0].key[0], 2.0);
  EXPECT_DOUBLE_EQ(bank.entries()[1].key[0], 3.0);
}

TEST(MemoryBank, SupportEntriesAreRejected) {
  mem3d::MemoryBank<double> bank(2, {});
  EXPECT_THROW(bank.push_evict(sup_entry({1, 0}), std::vector<double>{1, 0}), ContractError);
}

TEST(MemoryBank, ExtendedMemoryOrderAndTokenCount) {
  mem3d::MemoryBank<double> empty_bank(2, {sup_entry({1, 0}), sup_entry({0, 1})});
  auto e0 = empty_bank.extended_memory();
  ASSERT_EQ(e0.entries.size(), 2u);
  EXPECT_EQ(e0.entries[0].key, (std::vector<double>{1, 0}));

  Rng rng(9);
  std::vector<pmg::MemoryEntry<double>> statics = {
      pmg::make_entry(oracle::randn<double>({4, 2, 3}, rng), pmg::Source::Support)};
  mem3d::MemoryBank<double> bank(3, statics);
  bank.push_evict(pmg::make_entry(oracle::randn<double>({4, 2, 3}, rng), pmg::Source::Volumetric),
                  std::vector<double>{1, 0, 0, 0});
  bank.push_evict(pmg::make_entry(oracle::randn<double>({4, 2, 3}, rng), pmg::Source::Volumetric),
                  std::vector<double>{1, 0, 0, 0});
  auto m = bank.extended_memory();
  ASSERT_EQ(m.entries.size(), 3u);
  EXPECT_EQ(m.entries[0].source, pmg::Source::Support);
  EXPECT_EQ(m.entries[1].key, bank.entries()[0].key);
  EXPECT_EQ(m.entries[2].key, bank.entries()[1].key);
  EXPECT_EQ(m.token_count(), 18u);
  EXPECT_EQ(m.tokens().dim(0), 18u);
}

TEST(MemoryBank, ThreePushesAtCapacityTwoKeepTwo) {
  mem3d::MemoryBank<double> bank(2, {sup_entry({0, 1})});
  for (int i = 0; i < 3; ++i) bank.push_evict(vol_entry({1, double(i)}), std::vector<double>{1, 0});
  EXPECT_EQ(bank.entries().size(), 2u);
  EXPECT_EQ(bank.extended_memory().entries.size(), 3u);
}

TEST(MemoryBank, FuzzedPushesMatchBruteForceArgmin) {
  for (std::size_t cap : {1u, 2u, 3u, 5u}) {
    Rng rng(100 + cap);
    std::vector<pmg::MemoryEntry<double>> statics = {sup_entry({1, 2, 3}), sup_entry({-1, 0, 2})};
    mem3d::MemoryBank<double> bank(cap, statics);
    std::vector<std::vector<double>> model;
    for (int step = 0; step < 100; ++step) {
      std::vector<double> key(3), cur(3);
      // Coarse values make exact ties frequent.
      for (auto& x : key) x = double(int(rng.uniform(-2, 3)));
      for (auto& x : cur) x = rng.normal();
      model.push_back(key);
      std::optional<std::size_t> expect;
      if (model.size() > cap) {
        std::size_t v = 0;
        for (std::size_t i = 1; i < model.size(); ++i)
          if (pmg::cosine(model[i], cur) < pmg::cosine(model[v], cur)) v = i;
        expect = v;
        model.erase(model.begin() + std::ptrdiff_t(v));
      }
      auto got = bank.push_evict(vol_entry(key), cur);
      ASSERT_EQ(got, expect) << "cap " << cap << " step " << step;
      ASSERT_LE(bank.entries().size(), cap);
      ASSERT_EQ(bank.entries().size(), model.size());
      for (std::size_t i = 0; i < model.size(); ++i) ASSERT_EQ(bank.entries()[i].key, model[i]);
      ASSERT_EQ(bank.static_entries().size(), 2u);
      ASSERT_EQ(bank.static_entries()[0].key, statics[0].key);
      ASSERT_EQ(bank.static_entries()[1].key, statics[1].key);
    }
  }
}

TEST(Propagate, SingleSliceEqualsTwoDimensionalForwardBitwise) {
  Sam2Sgp<float> m(tiny(), 11);
  Rng rng(12);
  auto img = oracle::randn<float>({1, 16, 16}, rng);
  auto simg = oracle::randn<float>({1, 16, 16}, rng);
  auto smask = oracle::uniform<float>({1, 16, 16}, rng, 0.0, 1.0);
  auto statics = std::vector<pmg::MemoryEntry<float>>{m.support_entry(simg, smask)};
  auto vol = reshape(img, {1, 1, 16, 16});
  auto p3 = m.propagate_volume(vol, statics, 1);
  pmg::SupportMemorySet<float> set;
  set.entries = statics;
  auto p2 = m.forward_slice(img, set).final;
  EXPECT_EQ(p3.dims(), (Shape{1, 1, 16, 16}));
  EXPECT_EQ(p3.vec(), p2.vec());
}

TEST(Propagate, LaterSlicesSeeEarlierMemoriesAndRunIsDeterministic) {
  Sam2Sgp<float> m(tiny(), 13);
  Rng rng(14);
  auto vol = oracle::randn<float>({4, 1, 16, 16}, rng);
  auto statics = std::vector<pmg::MemoryEntry<float>>{
      m.support_entry(oracle::randn<float>({1, 16, 16}, rng), oracle::uniform<float>({1, 16, 16}, rng, 0.0, 1.0))};
  auto a = m.propagate_volume(vol, statics, 2);
  auto b = m.propagate_volume(vol, statics, 2);
  EXPECT_EQ(a.vec(), b.vec());
  EXPECT_EQ(a.dims(), (Shape{4, 1, 16, 16}));

  // Without a bank every slice is an independent 2D prediction; with one, slices
  // after the first change while the first does not.
  auto c = m.propagate_volume(vol, statics, 0);
  const std::size_t st = 256;
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().begin() + st, c.data().begin()));
  EXPECT_FALSE(std::equal(a.data().begin() + st, a.data().end(), c.data().begin() + st));

  std::vector<std::size_t> seen;
  m.propagate(vol, statics, 2, [&](std::size_t z, SliceResult<float>&) { seen.push_back(z); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Propagate, RejectsNonVolumeInput) {
  Sam2Sgp<float> m(tiny(), 15);
  EXPECT_THROW(m.propagate_volume(Tensor<float>({1, 16, 16}), {}, 1), ShapeError);
}
