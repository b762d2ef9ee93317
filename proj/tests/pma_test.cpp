#include <gtest/gtest.h>

#include "oracle.hpp"
#include "sgp/gradcheck.hpp"
#include "sgp/loss.hpp"
#include "sgp/model.hpp"
#include "sgp/pma.hpp"

using namespace sgp;

namespace {

std::vector<float> rect_mask(std::size_t H, std::size_t W, std::size_t r0, std::size_t c0, std::size_t r1,
                             std::size_t c1) {
  std::vector<float> m(H * W, 0.0f);
  for (std::size_t r = r0; r <= r1; ++r)
    for (std::size_t c = c0; c <= c1; ++c) m[r * W + c] = 1.0f;
  return m;
}

// Exhaustive scan: every foreground pixel pulls the box edges outward.
pma::BoxResult scan_box(const std::vector<float>& m, std::size_t H, std::size_t W, double tau, std::size_t margin) {
  long r0 = -1, c0 = -1, r1 = -1, c1 = -1;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (double(m[i]) < tau) continue;
    const long r = long(i / W), c = long(i % W);
    if (r0 < 0) {
      r0 = r1 = r;
      c0 = c1 = c;
    }
    r0 = std::min(r0, r);
    r1 = std::max(r1, r);
    c0 = std::min(c0, c);
    c1 = std::max(c1, c);
  }
  if (r0 < 0) return {BBox{0, 0, H - 1, W - 1}, true};
  const long m_ = long(margin);
  return {BBox{std::size_t(std::max(0L, r0 - m_)), std::size_t(std::max(0L, c0 - m_)),
               std::size_t(std::min(long(H) - 1, r1 + m_)), std::size_t(std::min(long(W) - 1, c1 + m_))},
          false};
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

TEST(BBoxFromMask, TightBoxWithoutMargin) {
  auto m = rect_mask(10, 12, 2, 3, 5, 7);
  auto b = pma::bbox_from_mask<float>(m, 10, 12, 0.5, 0);
  EXPECT_EQ(b.box, (BBox{2, 3, 5, 7}));
  EXPECT_FALSE(b.fallback);
}

TEST(BBoxFromMask, MarginIsClampedToImage) {
  auto m = rect_mask(10, 12, 1, 3, 5, 11);
  auto b = pma::bbox_from_mask<float>(m, 10, 12);
  EXPECT_EQ(b.box, (BBox{0, 1, 7, 11}));
}

TEST(BBoxFromMask, EmptyMaskFallsBackToFullImage) {
  std::vector<float> m(80, 0.0f);
  auto b = pma::bbox_from_mask<float>(m, 8, 10);
  EXPECT_TRUE(b.fallback);
  EXPECT_EQ(b.box, (BBox{0, 0, 7, 9}));
  std::vector<float> low(80, 0.49f);
  EXPECT_TRUE(pma::bbox_from_mask<float>(low, 8, 10).fallback);
}

TEST(BBoxFromMask, TranslationMovesBox) {
  const std::size_t H = 16, W = 16;
  auto base = pma::bbox_from_mask<float>(rect_mask(H, W, 4, 5, 7, 9), H, W);
  for (std::size_t dr = 0; dr < 4; ++dr)
    for (std::size_t dc = 0; dc < 4; ++dc) {
      auto b = pma::bbox_from_mask<float>(rect_mask(H, W, 4 + dr, 5 + dc, 7 + dr, 9 + dc), H, W);
      EXPECT_EQ(b.box, (BBox{base.box.r0 + dr, base.box.c0 + dc, base.box.r1 + dr, base.box.c1 + dc}));
    }
}

TEST(BBoxFromMask, MatchesPixelScanOnRandomMasks) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t H = 4 + std::size_t(rng.uniform(0, 20)), W = 4 + std::size_t(rng.uniform(0, 20));
    const double density = rng.uniform(0.0, 0.1);
    const double tau = rng.uniform(0.05, 0.95);
    const std::size_t margin = std::size_t(rng.uniform(0, 4));
    std::vector<float> m(H * W);
    for (auto& v : m) v = rng.uniform() < density ? float(rng.uniform(tau, 1.0)) : float(rng.uniform(0.0, tau) * 0.99);
    auto got = pma::bbox_from_mask<float>(m, H, W, tau, margin);
    auto want = scan_box(m, H, W, tau, margin);
    ASSERT_EQ(got.box, want.box) << "trial " << trial;
    ASSERT_EQ(got.fallback, want.fallback) << "trial " << trial;
  }
}

TEST(BBoxFromMask, ContractViolations) {
  std::vector<float> m(16, 1.0f);
  EXPECT_THROW(pma::bbox_from_mask<float>(m, 4, 5), ShapeError);
  EXPECT_THROW(pma::bbox_from_mask<float>(m, 4, 4, 0.0), ContractError);
  EXPECT_THROW(pma::bbox_from_mask<float>(m, 4, 4, 1.0), ContractError);
}

TEST(MaskAttention, ZeroGateLeavesFeaturesBitwise) {
  pma::MaskAttention<float> ma(16, Rng(22));
  Rng rng(23);
  auto f = oracle::randn<float>({16, 4, 4}, rng);
  auto out = ma(f, Tensor<float>({16, 16}));
  EXPECT_EQ(out.vec(), f.vec());
  auto out3 = ma(f, Tensor<float>({1, 16, 16}));
  EXPECT_EQ(out3.vec(), f.vec());
}

TEST(MaskAttention, UnitGateIsSelfAttentionPlusResidual) {
  pma::MaskAttention<double> ma(8, Rng(24));
  Rng rng(25);
  auto f = oracle::randn<double>({8, 3, 3}, rng);
  auto out = ma(f, Tensor<double>({1, 12, 12}, 1.0));
  auto want = oracle::mask_attention(ma, oracle::to_mat(grid_to_tokens(f)), std::vector<double>(9, 1.0));
  EXPECT_LT(oracle::max_abs_diff(want, grid_to_tokens(out)), 1e-12);
}

TEST(MaskAttention, FourTokensMatchBruteForce) {
  Rng rng(26);
  for (int trial = 0; trial < 100; ++trial) {
    pma::MaskAttention<double> ma(6, rng.split(std::uint64_t(trial)));
    auto f = oracle::randn<double>({6, 2, 2}, rng);
    auto pm = oracle::uniform<double>({1, 4, 4}, rng, 0.0, 1.0);
    // Halving a 4x4 map with half-pixel centres averages each 2x2 block.
    std::vector<double> gate(4);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 2; ++c) {
        double s = 0;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) s += pm[(2 * r + a) * 4 + 2 * c + b];
        gate[r * 2 + c] = s / 4;
      }
    auto want = oracle::mask_attention(ma, oracle::to_mat(grid_to_tokens(f)), gate);
    auto got = grid_to_tokens(ma(f, pm));
    ASSERT_LT(oracle::max_abs_diff(want, got), 1e-5) << "trial " << trial;
  }
}

TEST(MaskAttention, GateMultipliesOnlyAttentionTerm) {
  pma::MaskAttention<double> ma(8, Rng(27));
  Rng rng(28);
  auto f = oracle::randn<double>({8, 2, 2}, rng);
  auto full = ma(f, Tensor<double>({1, 8, 8}, 1.0));
  auto half = ma(f, Tensor<double>({1, 8, 8}, 0.5));
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(half[i] - f[i], 0.5 * (full[i] - f[i]), 1e-12);
}

TEST(MaskAttention, RejectsMultiChannelGate) {
  pma::MaskAttention<float> ma(8, Rng(29));
  EXPECT_THROW(ma(Tensor<float>({8, 2, 2}), Tensor<float>({2, 8, 8})), ShapeError);
}

TEST(MaskAttention, GradcheckIncludingGate) {
  pma::MaskAttention<double> ma(6, Rng(30));
  nn::ParamList<double> ps;
  ma.collect(ps, "m");
  Rng rng(31);
  auto f = oracle::randn<double>({6, 2, 2}, rng);
  auto pm = oracle::uniform<double>({1, 8, 8}, rng, 0.05, 0.95);
  auto w = oracle::randn<double>({6, 2, 2}, rng);
  std::vector<Tensor<double>> inputs = {f, pm};
  for (auto& p : ps) inputs.push_back(p.tensor);
  auto fn = [&] { return sum(mul(ma(f, pm), w)); };
  auto rep = gradcheck_params<double>(fn, inputs, 1e-5);
  EXPECT_LT(rep.max_rel_error, 1e-3) << "worst " << rep.worst;
  f.zero_grad();
  pm.zero_grad();
  backward(fn());
  double gsum = 0;
  for (double g : pm.grad()) gsum += std::abs(g);
  EXPECT_GT(gsum, 0.0);
}

TEST(PredictFinal, DimsBoxSensitivityAndZeroHead) {
  auto cfg = tiny();
  cfg.classes = 3;
  Sam2Sgp<float> m(cfg, 32);
  Rng rng(33);
  auto feats = m.encode(oracle::randn<float>({1, 16, 16}, rng));
  auto& dec = m.final_decoder();
  auto a = dec.decode(feats.grid, feats.skip, m.prompt_encoder().box(BBox{0, 0, 15, 15}, 16, 16));
  auto b = dec.decode(feats.grid, feats.skip, m.prompt_encoder().box(BBox{3, 4, 9, 12}, 16, 16));
  EXPECT_EQ(a.dims(), (Shape{3, 16, 16}));
  EXPECT_NE(a.vec(), b.vec());
  dec.zero_head();
  auto z = sigmoid(dec.decode(feats.grid, feats.skip, m.prompt_encoder().box(BBox{3, 4, 9, 12}, 16, 16)));
  for (float v : z.data()) EXPECT_EQ(v, 0.5f);
}

TEST(PredictFinal, ForwardUsesOneBoxPerClass) {
  auto cfg = tiny();
  cfg.classes = 2;
  Sam2Sgp<float> m(cfg, 34);
  Rng rng(35);
  pmg::SupportMemorySet<float> set;
  set.entries.push_back(m.support_entry(oracle::randn<float>({1, 16, 16}, rng),
                                        oracle::uniform<float>({2, 16, 16}, rng, 0.0, 1.0)));
  auto r = m.forward_slice(oracle::randn<float>({1, 16, 16}, rng), set);
  ASSERT_EQ(r.boxes.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    auto pm = slice0(r.pseudo, k, k + 1);
    EXPECT_EQ(r.boxes[k], pma::bbox_from_mask(pm.data(), 16, 16).box);
  }
  EXPECT_EQ(r.final.dims(), (Shape{2, 16, 16}));
  for (float v : r.final.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(PmaGradcheck, GateToLossOnEightByEight) {
  Sam2Sgp<double> m(tiny(), 36);
  {
    nn::ParamList<double> ma_ps;
    m.mask_attention().collect(ma_ps, "m");
    oracle::randomize(ma_ps, Rng(37), 0.5);
  }
  Rng rng(38);
  auto feats = m.encode(oracle::randn<double>({1, 8, 8}, rng));
  auto f_tilde = oracle::randn<double>({8, 2, 2}, rng);
  auto pm = oracle::uniform<double>({1, 8, 8}, rng, 0.05, 0.95);
  Tensor<double> target({1, 8, 8});
  for (std::size_t i = 0; i < 64; ++i) target.mutable_data()[i] = (i / 8 >= 2 && i % 8 < 5) ? 1.0 : 0.0;
  const auto box = pma::bbox_from_mask(pm.data(), 8, 8).box;
  std::vector<Tensor<double>> inputs = {f_tilde, pm};
  nn::ParamList<double> ps;
  m.mask_attention().collect(ps, "m");
  m.final_decoder().collect(ps, "d");
  for (auto& p : ps) inputs.push_back(p.tensor);
  auto fn = [&] {
    auto f_hat = m.mask_attention()(f_tilde, pm);
    auto pred = sigmoid(m.final_decoder().decode(f_hat, feats.skip, m.prompt_encoder().box(box, 8, 8)));
    return total_loss(pred, Tensor<double>(), target, LossConfig{}).total;
  };
  auto rep = gradcheck_params<double>(fn, inputs, 1e-5, 8, 39);
  EXPECT_LT(rep.max_rel_error, 1e-3) << "worst " << rep.worst << " of " << rep.entries;
}

TEST(PmaPipeline, DeterministicUnderFixedSeed) {
  auto run = [] {
    Sam2Sgp<float> m(tiny(), 40);
    Rng rng(41);
    pmg::SupportMemorySet<float> set;
    set.entries.push_back(m.support_entry(oracle::randn<float>({1, 16, 16}, rng),
                                          oracle::uniform<float>({1, 16, 16}, rng, 0.0, 1.0)));
    return m.forward_slice(oracle::randn<float>({1, 16, 16}, rng), set);
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.final.vec(), b.final.vec());
  EXPECT_EQ(a.f_hat.vec(), b.f_hat.vec());
  EXPECT_EQ(a.boxes, b.boxes);
}
