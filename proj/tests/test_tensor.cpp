#include <gtest/gtest.h>

#include <cmath>

#include "first/errors.hpp"
#include "first/gemm.hpp"
#include "first/ops.hpp"
#include "first/rng.hpp"

namespace first {
namespace {

Tensor<double> t2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>(Shape{r, c}, std::move(v)); }

TEST(Tensor, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_EQ(Tensor<float>::zeros({2, 3}).numel(), 6u);
  EXPECT_EQ(Tensor<float>::scalar(2.5f).item(), 2.5f);
}

TEST(Tensor, CloneIsDeepAndCopyIsShared) {
  auto a = Tensor<float>::zeros({2});
  auto shared = a;
  auto deep = a.clone();
  a.mutable_data()[0] = 1.0f;
  EXPECT_EQ(shared[0], 1.0f);
  EXPECT_EQ(deep[0], 0.0f);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  std::vector<double> a(9);
  for (auto& v : a) v = rng.normal(0, 1);
  const auto A = t2(3, 3, a);
  const auto I = t2(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto out = matmul(I, A);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(out[i], a[i]);
}

TEST(Matmul, HandExample) {
  const auto out = matmul(t2(2, 2, {1, 2, 3, 4}), t2(2, 1, {0, 1}));
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_EQ(out[0], 2);
  EXPECT_EQ(out[1], 4);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumIsColumnSumsOfRhs) {
  auto A = t2(2, 3, {1, 2, 3, 4, 5, 6});
  const auto B = t2(3, 2, {1, -1, 2, 0.5, -3, 4});
  A.set_requires_grad(true);
  sum_all(matmul(A, B)).backward();
  const double rows[3] = {0.0, 2.5, 1.0};
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(A.grad()[i * 3 + k], rows[k]);
}

TEST(Gemm, TransposeVariantsAgreeWithNaive) {
  Rng rng(3);
  const std::size_t M = 5, N = 7, K = 4;
  std::vector<double> a(M * K), b(K * N), at(K * M), bt(N * K);
  for (auto& v : a) v = rng.normal(0, 1);
  for (auto& v : b) v = rng.normal(0, 1);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) at[k * M + i] = a[i * K + k];
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < N; ++j) bt[j * K + k] = b[k * N + j];
  std::vector<double> ref(M * N, 0.0);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t k = 0; k < K; ++k) ref[i * N + j] += a[i * K + k] * b[k * N + j];
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      std::vector<double> c(M * N, 0.0);
      kernels::gemm<double>(ta, tb, M, N, K, ta ? at.data() : a.data(), tb ? bt.data() : b.data(), c.data(), false);
      for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12) << ta << tb;
    }
}

TEST(Sigmoid, ReferenceValues) {
  const auto y = sigmoid(Tensor<double>(Shape{4}, {0.0, 1e3, 1.0, -1e3}));
  EXPECT_EQ(y[0], 0.5);
  EXPECT_NEAR(y[1], 1.0, 1e-6);
  EXPECT_NEAR(y[2], 0.7310585786, 1e-6);
  EXPECT_NEAR(y[3], 0.0, 1e-6);
  EXPECT_TRUE(std::isfinite(y[3]));
}

TEST(Softmax, UniformRow) {
  const auto y = softmax_rows(Tensor<double>(Shape{1, 3}, {0, 0, 0}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 1.0 / 3.0, 1e-12);
}

TEST(Softmax, MaskedEntryIsZero) {
  RowMask mask{1, 3, {1, 1, 0}};
  const auto y = softmax_rows(Tensor<double>(Shape{1, 3}, {1, 1, 1}), mask);
  EXPECT_NEAR(y[0], 0.5, 1e-12);
  EXPECT_NEAR(y[1], 0.5, 1e-12);
  EXPECT_EQ(y[2], 0.0);
}

TEST(Softmax, ReferenceValues) {
  const auto y = softmax_rows(Tensor<double>(Shape{1, 3}, {1, 2, 3}));
  EXPECT_NEAR(y[0], 0.0900, 1e-4);
  EXPECT_NEAR(y[1], 0.2447, 1e-4);
  EXPECT_NEAR(y[2], 0.6652, 1e-4);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(4);
  std::vector<double> v(20);
  for (auto& x : v) x = rng.normal(0, 3);
  std::vector<double> shifted = v;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 5; ++c) shifted[r * 5 + c] += 10.0 * static_cast<double>(r);
  const auto a = softmax_rows(Tensor<double>(Shape{4, 5}, v));
  const auto b = softmax_rows(Tensor<double>(Shape{4, 5}, shifted));
  for (std::size_t r = 0; r < 4; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      sum += a[r * 5 + c];
      EXPECT_NEAR(a[r * 5 + c], b[r * 5 + c], 1e-12);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Softmax, FullyMaskedRowThrows) {
  RowMask mask{1, 2, {0, 0}};
  EXPECT_THROW(softmax_rows(Tensor<float>::zeros({1, 2}), mask), DegenerateInputError);
}

TEST(MeanAxis, Values) {
  EXPECT_EQ(mean_axis(Tensor<double>(Shape{2}, {0.2, 0.8}), 0).item(), 0.5);
  const auto c = mean_axis(Tensor<double>::full({3, 4}, 2.5), 1);
  for (double v : c.data()) EXPECT_EQ(v, 2.5);
  EXPECT_THROW(mean_axis(Tensor<double>::zeros({2, 0}), 1), DegenerateInputError);
  EXPECT_THROW(mean_axis(Tensor<double>::zeros({2}), 1), DimensionError);
}

TEST(MeanAxis, BackwardDistributesOneOverN) {
  auto x = Tensor<double>::zeros({4});
  x.set_requires_grad(true);
  mean_axis(x, 0).backward();
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(CrossEntropy, PerfectLogits) {
  std::vector<double> logits(4, -30.0);
  logits[2] = 30.0;
  const std::vector<std::int32_t> t{2};
  EXPECT_LT(cross_entropy(Tensor<double>(Shape{1, 4}, logits), std::span(t)).item(), 1e-9);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  const std::vector<std::int32_t> t{1};
  EXPECT_NEAR(cross_entropy(Tensor<double>::zeros({1, 4}), std::span(t)).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
}

TEST(CrossEntropy, MatchesPerPositionLogSoftmax) {
  Rng rng(9);
  std::vector<double> v(8);
  for (auto& x : v) x = rng.normal(0, 2);
  const std::vector<std::int32_t> t{3, 0};
  double expected = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 4; ++c) z += std::exp(v[r * 4 + c]);
    expected += -(v[r * 4 + static_cast<std::size_t>(t[r])] - std::log(z));
  }
  EXPECT_NEAR(cross_entropy(Tensor<double>(Shape{2, 4}, v), std::span(t)).item(), expected / 2, 1e-12);
}

TEST(CrossEntropy, IgnoredRowsAndErrors) {
  const std::vector<std::int32_t> t{0, 1};
  const std::vector<std::uint8_t> all{1, 1};
  EXPECT_THROW(cross_entropy(Tensor<double>::zeros({2, 4}), std::span(t), std::span(all)), DegenerateInputError);
  const std::vector<std::int32_t> bad{0, 9};
  EXPECT_THROW(cross_entropy(Tensor<double>::zeros({2, 4}), std::span(bad)), VocabularyError);
}

TEST(RmsNorm, UnitWeightNormalizesRms) {
  const auto y = rmsnorm(Tensor<double>(Shape{1, 2}, {3.0, 4.0}), Tensor<double>::full({2}, 1.0), 0.0);
  const double rms = std::sqrt(12.5);
  EXPECT_NEAR(y[0], 3.0 / rms, 1e-12);
  EXPECT_NEAR(y[1], 4.0 / rms, 1e-12);
}

TEST(Embedding, GathersRowsAndRejectsOutOfVocab) {
  const auto table = Tensor<double>(Shape{3, 2}, {0, 1, 10, 11, 20, 21});
  const std::vector<std::int32_t> ids{2, 0};
  const auto e = embedding(table, std::span(ids), Shape{1, 2});
  EXPECT_EQ(e.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(e.values(), (std::vector<double>{20, 21, 0, 1}));
  const std::vector<std::int32_t> bad{3};
  EXPECT_THROW(embedding(table, std::span(bad), Shape{1}), VocabularyError);
}

TEST(ConcatSlice, RoundTrip) {
  const auto a = Tensor<double>(Shape{1, 2, 2}, {1, 2, 3, 4});
  const auto b = Tensor<double>(Shape{1, 1, 2}, {5, 6});
  const auto c = concat(a, b, 1);
  EXPECT_EQ(c.shape(), (Shape{1, 3, 2}));
  EXPECT_EQ(slice(c, 1, 2, 1).values(), b.values());
  EXPECT_EQ(slice(c, 1, 0, 2).values(), a.values());
}

TEST(Permute, MovesAxes) {
  const auto x = Tensor<double>(Shape{2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(transpose(x).values(), (std::vector<double>{0, 3, 1, 4, 2, 5}));
  EXPECT_EQ(permute(x, {1, 0}).values(), transpose(x).values());
}

TEST(Rope, PositionZeroIsIdentityAndNormPreserved) {
  Rng rng(2);
  std::vector<double> v(8);
  for (auto& x : v) x = rng.normal(0, 1);
  const auto x = Tensor<double>(Shape{1, 1, 1, 8}, v);
  EXPECT_EQ(rope(x, 0).values(), v);
  const auto y = rope(x, 17);
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_NEAR(std::hypot(y[2 * p], y[2 * p + 1]), std::hypot(v[2 * p], v[2 * p + 1]), 1e-12);
  }
}

TEST(Dropout, InvertedScalingAndZeroRateIdentity) {
  Rng rng(3);
  const auto x = Tensor<double>::full({1000}, 1.0);
  EXPECT_EQ(dropout(x, 0.0, rng).values(), x.values());
  const auto y = dropout(x, 0.25, rng);
  std::size_t zeros = 0;
  for (double v : y.data()) {
    if (v == 0.0) ++zeros;
    else EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
  }
  EXPECT_GT(zeros, 150u);
  EXPECT_LT(zeros, 350u);
  EXPECT_THROW(dropout(x, 1.0, rng), ConfigError);
}

TEST(NoGrad, SuppressesTape) {
  auto x = Tensor<double>::full({2}, 1.0);
  x.set_requires_grad(true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(sum_all(x).requires_grad());
  }
  EXPECT_TRUE(sum_all(x).requires_grad());
}

TEST(Rng, SplitStreamsAreDeterministicAndDistinct) {
  Rng a(42), b(42);
  EXPECT_EQ(a.split("x").integer(0, 1 << 30), b.split("x").integer(0, 1 << 30));
  Rng c(42);
  EXPECT_NE(c.split("x").integer(0, 1 << 30), c.split("y").integer(0, 1 << 30));
}

}  // namespace
}  // namespace first
