#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "sgp/gradcheck.hpp"
#include "sgp/gradcheck_suite.hpp"
#include "sgp/ops.hpp"
#include "sgp/rng.hpp"
#include "sgp/sgt_io.hpp"

using namespace sgp;

namespace {

template <typename T = double>
Tensor<T> random_tensor(Shape dims, Rng& rng, double scale = 1.0) {
  std::vector<T> v(numel(dims));
  for (auto& x : v) x = T(rng.normal() * scale);
  return Tensor<T>::parameter(std::move(dims), std::move(v));
}

Tensor<float> mat(std::size_t r, std::size_t c, std::vector<float> v) { return Tensor<float>({r, c}, std::move(v)); }

}  // namespace

TEST(Matmul, Examples) {
  auto id = mat(2, 2, {1, 0, 0, 1});
  auto b = mat(2, 2, {5, 6, 7, 8});
  EXPECT_TRUE(bitwise_equal(matmul(id, b), b));
  EXPECT_FLOAT_EQ(matmul(mat(1, 2, {1, 2}), mat(2, 1, {3, 4})).item(), 11.0f);
  auto z = matmul(mat(2, 3, {1, 2, 3, 4, 5, 6}), Tensor<float>({3, 2}));
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor<float>({2, 3}), Tensor<float>({4, 5}));
    FAIL();
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, IdentityIsExactOnBothSides) {
  Rng rng(3);
  std::vector<float> v(12);
  for (auto& x : v) x = float(rng.range(-50, 50)) / 4.0f;
  auto a = mat(3, 4, v);
  std::vector<float> i3(9, 0), i4(16, 0);
  for (int i = 0; i < 3; ++i) i3[i * 4] = 1;
  for (int i = 0; i < 4; ++i) i4[i * 5] = 1;
  EXPECT_TRUE(bitwise_equal(matmul(mat(3, 3, i3), a), a));
  EXPECT_TRUE(bitwise_equal(matmul(a, mat(4, 4, i4)), a));
}

TEST(Softmax, Examples) {
  auto y = softmax_rows(mat(3, 3, {0, 0, 0, 7, 7, 7, float(std::log(2.0)), 0, -1e30f}));
  EXPECT_NEAR(y.at(0, 0), 1.0 / 3, 1e-7);
  EXPECT_NEAR(y.at(1, 2), 1.0 / 3, 1e-7);
  EXPECT_NEAR(y.at(2, 0), 2.0 / 3, 1e-6);
  EXPECT_NEAR(y.at(2, 1), 1.0 / 3, 1e-6);
  auto h = softmax_rows(mat(1, 2, {0, 0}));
  EXPECT_FLOAT_EQ(h[0], 0.5f);
  EXPECT_FLOAT_EQ(h[1], 0.5f);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> v(4 * 7);
    for (auto& x : v) x = float(rng.normal() * 5);
    const float c = float(rng.uniform(-20, 20));
    std::vector<float> shifted(v);
    for (auto& x : shifted) x += c;
    auto a = softmax_rows(mat(4, 7, v));
    auto b = softmax_rows(mat(4, 7, shifted));
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int j = 0; j < 7; ++j) {
        s += a.at(r, j);
        EXPECT_NEAR(a.at(r, j), b.at(r, j), 1e-6);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, NaNIsReported) {
  EXPECT_THROW(softmax_rows(mat(1, 2, {0, std::nanf("")})), NumericError);
}

TEST(Conv2d, Examples) {
  std::vector<float> v(16);
  for (int i = 0; i < 16; ++i) v[i] = float(i);
  auto sub = conv2d(Tensor<float>({1, 4, 4}, v), Tensor<float>({1, 1, 1, 1}, 1.0f), Tensor<float>(), 2);
  ASSERT_EQ(sub.dims(), (Shape{1, 2, 2}));
  EXPECT_EQ(sub[0], 0);
  EXPECT_EQ(sub[1], 2);
  EXPECT_EQ(sub[2], 8);
  EXPECT_EQ(sub[3], 10);

  auto ones = conv2d(Tensor<float>({1, 5, 5}, 1.0f), Tensor<float>({1, 1, 3, 3}, 1.0f), Tensor<float>(), 1);
  ASSERT_EQ(ones.dims(), (Shape{1, 5, 5}));
  EXPECT_EQ(ones[2 * 5 + 2], 9);
  EXPECT_EQ(ones[0], 4);  // corner sees 2x2 taps through zero padding

  auto z = conv2d(Tensor<float>({2, 6, 6}, 3.0f), Tensor<float>({3, 2, 3, 3}), Tensor<float>(), 2);
  ASSERT_EQ(z.dims(), (Shape{3, 3, 3}));
  for (float x : z.data()) EXPECT_EQ(x, 0);
}

TEST(Conv2d, OutputExtentFormula) {
  for (std::size_t k : {1u, 3u, 5u}) {
    for (int s : {1, 2, 3, 4}) {
      for (std::size_t H : {5u, 8u, 9u}) {
        auto y = conv2d(Tensor<float>({1, H, H}, 1.0f), Tensor<float>({1, 1, k, k}, 1.0f), Tensor<float>(), s);
        const std::size_t expect = (H - k + 2 * (k / 2)) / s + 1;
        EXPECT_EQ(y.dim(1), expect);
        EXPECT_EQ(y.dim(2), expect);
      }
    }
  }
}

TEST(Conv2d, ParameterErrors) {
  EXPECT_THROW(conv2d(Tensor<float>({1, 4, 4}), Tensor<float>({1, 1, 3, 3}), Tensor<float>(), 0), ContractError);
  EXPECT_THROW(conv2d(Tensor<float>({1, 4, 4}), Tensor<float>({1, 1, 2, 2}), Tensor<float>(), 1), ContractError);
  EXPECT_THROW(conv2d(Tensor<float>({2, 4, 4}), Tensor<float>({1, 1, 3, 3}), Tensor<float>(), 1), ShapeError);
}

TEST(ResizeBilinear, Examples) {
  auto c = resize_bilinear(Tensor<float>({2, 5, 3}, 0.7f), 7, 11);
  for (float v : c.data()) EXPECT_EQ(v, 0.7f);
  auto c2 = resize_bilinear(Tensor<float>({1, 16, 16}, 0.7f), 4, 4);
  for (float v : c2.data()) EXPECT_EQ(v, 0.7f);

  Rng rng(2);
  auto x = random_tensor<float>({3, 4, 6}, rng);
  EXPECT_TRUE(bitwise_equal(resize_bilinear(x, 4, 6), x));

  // Half-pixel centres: source columns -0.25, 0.25, 0.75, 1.25 clamped to [0, 1].
  auto r = resize_bilinear(Tensor<float>({1, 2, 2}, {0, 1, 0, 1}), 2, 4);
  const float expect[4] = {0.0f, 0.25f, 0.75f, 1.0f};
  for (int row = 0; row < 2; ++row)
    for (int col = 0; col < 4; ++col) EXPECT_FLOAT_EQ(r[row * 4 + col], expect[col]);
}

TEST(Backward, LinearFormAndIndependence) {
  Rng rng(5);
  auto w = random_tensor<double>({2, 3}, rng);
  auto x = Tensor<double>({3, 1}, {1.5, -2.0, 0.25});
  auto p = random_tensor<double>({4}, rng);
  auto loss = sum(matmul(w, x));
  backward(loss);
  auto g = w.grad();
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(g[i * 3 + j], x[j]);
  for (double v : p.grad()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, SecondPassAccumulates) {
  Rng rng(6);
  auto w = random_tensor<double>({3, 3}, rng);
  auto x = random_tensor<double>({3, 2}, rng);
  auto loss = mean(softmax_rows(matmul(w, x)));
  auto loss2 = sum(mul(matmul(w, x), matmul(w, x)));
  backward(loss2);
  auto once = w.grad();
  backward(loss2);
  auto twice = w.grad();
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_DOUBLE_EQ(twice[i], 2 * once[i]);
  (void)loss;
}

TEST(Backward, RejectsNonScalar) {
  auto w = Tensor<float>::parameter({2}, {1, 2});
  EXPECT_THROW(backward(scale(w, 2.0f)), ContractError);
}

TEST(Backward, DiamondVisitsSharedNodeOnce) {
  auto x = Tensor<double>::parameter({1}, {3.0});
  auto y = mul(x, x);       // shared
  auto z = add(y, y);       // 2x^2
  backward(sum(z));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, DeterministicGradients) {
  auto run = [] {
    Rng rng(21);
    auto w = random_tensor<float>({8, 8}, rng);
    auto x = random_tensor<float>({8, 8}, rng);
    backward(mean(gelu(softmax_rows(matmul_nt(matmul(w, x), x)))));
    return w.grad();
  };
  auto a = run();
  auto b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
}

TEST(Gradcheck, SumOfSquaresAndConstant) {
  Rng rng(1);
  auto x = random_tensor<double>({5, 3}, rng);
  EXPECT_LT(gradcheck<double>([](const Tensor<double>& t) { return sum(mul(t, t)); }, x), 1e-5);
  auto rep = gradcheck_params<double>([] { return Tensor<double>::scalar(4.0); }, {x});
  EXPECT_EQ(rep.max_rel_error, 0.0);
  EXPECT_EQ(rep.max_grad, 0.0);
  EXPECT_THROW(gradcheck<double>([](const Tensor<double>& t) { return sum(t); }, x, 1e-2), ContractError);
}

// Every registered differentiable op at 10 random points with a fixed seed.
TEST(OpGradcheckSuite, EveryOpAtTenRandomPoints) {
  Rng rng(2024);
  for (const auto& c : gcsuite::op_cases()) {
    for (int point = 0; point < 10; ++point) {
      std::vector<Tensor<double>> xs;
      for (const auto& s : c.shapes) xs.push_back(random_tensor<double>(s, rng));
      auto rep = gradcheck_params<double>([&] { return c.f(xs); }, xs, 1e-5);
      EXPECT_LT(rep.max_rel_error, 1e-3) << c.name << " point " << point << " worst " << rep.worst;
    }
  }
}

TEST(Rng, SameSeedSameSequenceAndSplitsDiffer) {
  Rng a(77), b(77);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng s1 = Rng(77).split(1), s2 = Rng(77).split(2);
  EXPECT_NE(s1.next_u64(), s2.next_u64());
  Rng u(5);
  double m = 0;
  for (int i = 0; i < 20000; ++i) m += u.uniform();
  EXPECT_NEAR(m / 20000, 0.5, 0.01);
}

TEST(SgtIo, RoundTripIsBitwise) {
  Rng rng(8);
  auto dir = std::filesystem::temp_directory_path() / "sgp_sgt_test";
  std::filesystem::create_directories(dir);
  for (const Shape& s : {Shape{}, Shape{7}, Shape{3, 4}, Shape{2, 1, 5, 3}}) {
    auto t = random_tensor<float>(s, rng);
    write_sgt(dir / "t.sgt", t);
    auto back = read_sgt<float>(dir / "t.sgt");
    EXPECT_TRUE(bitwise_equal(t, back)) << shape_str(s);
  }
}

TEST(SgtIo, HeaderLayout) {
  auto bytes = encode_sgt({2, 3}, std::vector<float>(6, 1.0f));
  ASSERT_EQ(bytes.size(), 4 + 1 + 1 + 16 + 24u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SGT1");
  EXPECT_EQ(bytes[4], 0);
  EXPECT_EQ(bytes[5], 2);
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(bytes[14], 3);
}

TEST(SgtIo, RejectsCorruptFiles) {
  auto dir = std::filesystem::temp_directory_path() / "sgp_sgt_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "bad.sgt", std::ios::binary);
    os << "NOPE";
  }
  EXPECT_THROW(read_sgt<float>(dir / "bad.sgt"), IoError);
  EXPECT_THROW(read_sgt<float>(dir / "missing.sgt"), IoError);
}
