#include <cmath>
#include <functional>
#include <limits>
#include <set>

#include <gtest/gtest.h>

#include "mmbt/gradcheck.hpp"
#include "test_util.hpp"

using namespace mmbt;
using mmbt::testing::random_tensor;

namespace {

using T2 = Tensor<double>;

T2 mat(std::size_t r, std::size_t c, std::vector<double> v, bool rg = false) {
  return T2({r, c}, std::move(v), rg);
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

void expect_values(const T2& t, const std::vector<double>& want, double tol) {
  ASSERT_EQ(t.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t[i], want[i], tol) << "entry " << i;
}

/// Random linear functional of `out`, so every output entry gets a distinct weight.
T2 probe(const T2& out, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<double> w(out.size());
  for (auto& x : w) x = rng.normal();
  return weighted_sum(out, w);
}

constexpr int kSeeds = 5;
constexpr double kTol = 1e-4;

void check_op(const std::string& what, const std::function<T2(std::vector<T2>&)>& op,
              const std::vector<Shape>& shapes, double stddev = 1.0) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(100 + s);
    std::vector<T2> leaves;
    ParamList<double> named;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      leaves.push_back(random_tensor(shapes[i], rng, stddev));
      named.push_back({"x" + std::to_string(i), leaves.back()});
    }
    auto r = gradcheck([&] { return probe(op(leaves), s); }, named, {.seed = std::uint64_t(s)});
    EXPECT_TRUE(r.passed(kTol)) << what << " seed " << s << ": rel err " << r.max_rel_error
                                << " at " << r.worst_leaf << "[" << r.worst_index << "]";
  }
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto out = matmul(mat(2, 2, {1, 0, 0, 1}), mat(2, 2, {1, 2, 3, 4}));
  expect_values(out, {1, 2, 3, 4}, 0.0);
}

TEST(Matmul, ZeroMatrixAnnihilates) {
  Rng rng(1);
  auto out = matmul(T2::zeros({2, 3}), random_tensor({3, 4}, rng));
  EXPECT_EQ(out.shape(), (Shape{2, 4}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, HandComputedProduct) {
  auto out = matmul(mat(2, 2, {1, 2, 3, 4}), mat(2, 2, {5, 6, 7, 8}));
  expect_values(out, {19, 22, 43, 50}, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(T2::zeros({2, 3}), T2::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientRulesMatchTransposedProducts) {
  auto a = mat(2, 3, {1, 2, 3, 4, 5, 6}, true);
  auto b = mat(3, 2, {1, -1, 2, 0, 0.5, 3}, true);
  backward(sum(matmul(a, b)));
  // dL/da = 1 * b^T: row sums of b; dL/db = a^T * 1: column sums of a.
  expect_values(T2({2, 3}, vec(a.grad())), {0, 2, 3.5, 0, 2, 3.5}, 1e-15);
  expect_values(T2({3, 2}, vec(b.grad())), {5, 5, 7, 7, 9, 9}, 1e-15);
}

TEST(Softmax, UniformInput) {
  expect_values(softmax_rows(mat(1, 3, {0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  auto out = softmax_rows(mat(1, 2, {1000, 0}));
  EXPECT_TRUE(all_finite(out));
  expect_values(out, {1.0, 0.0}, 1e-12);
}

TEST(Softmax, MatchesExpNormalize) {
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  expect_values(softmax_rows(mat(1, 3, {1, 2, 3})),
                {std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z}, 1e-15);
}

TEST(Softmax, NanPropagatesAndIsFlagged) {
  auto out = softmax_rows(mat(1, 3, {0, std::numeric_limits<double>::quiet_NaN(), 1}));
  EXPECT_FALSE(all_finite(out));
}

TEST(Softmax, RowsAreDistributions) {
  for (int s = 0; s < 20; ++s) {
    Rng rng(s);
    auto out = softmax_rows(random_tensor({7, 1 + rng.index(40)}, rng, 10.0));
    const std::size_t n = out.dim(1);
    for (std::size_t r = 0; r < out.dim(0); ++r) {
      double total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        double v = out.at(r, j);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, ConstantRowBecomesZero) {
  auto out = layer_norm(mat(1, 4, {3, 3, 3, 3}), T2::full({4}, 1), T2::zeros({4}));
  expect_values(out, {0, 0, 0, 0}, 0.0);
}

TEST(LayerNorm, SymmetricPairIsAlreadyStandard) {
  // mean 0, variance 1, so x / sqrt(1 + eps).
  auto out = layer_norm(mat(1, 2, {1, -1}), T2::full({2}, 1), T2::zeros({2}));
  const double k = 1.0 / std::sqrt(1.0 + 1e-6);
  expect_values(out, {k, -k}, 1e-15);
}

TEST(LayerNorm, ZeroGainLeavesBias) {
  Rng rng(3);
  auto out = layer_norm(random_tensor({3, 5}, rng), T2::zeros({5}), T2::full({5}, 5));
  for (double v : out.values()) EXPECT_EQ(v, 5.0);
}

TEST(LayerNorm, RowsAreStandardised) {
  Rng rng(4);
  auto out = layer_norm(random_tensor({6, 16}, rng, 3.0), T2::full({16}, 1), T2::zeros({16}));
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += out.at(r, j) / 16;
    for (std::size_t j = 0; j < 16; ++j) v += (out.at(r, j) - m) * (out.at(r, j) - m) / 16;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(LayerNorm, RejectsWrongGainLength) {
  EXPECT_THROW(layer_norm(T2::zeros({2, 3}), T2::zeros({2}), T2::zeros({3})), DimensionError);
}

TEST(Conv, MatPatchEmbedGrid) {
  const Extents k{7, 7}, s{4, 4};
  const Extents pad{derive_padding(128, 7, 4, 32), derive_padding(1024, 7, 4, 256)};
  Rng rng(5);
  auto x = random_tensor<float>({1, 128, 1024}, rng, 1.0, false);
  auto w = random_tensor<float>({96, 1, 7, 7}, rng, 0.02, false);
  auto out = conv2d(x, w, Tensor<float>::zeros({96}), s, pad);
  EXPECT_EQ(out.shape(), (Shape{96, 32, 256}));
}

TEST(Conv, FullCoverKernelIsDotProduct) {
  Rng rng(6);
  auto x = random_tensor({1, 16, 16}, rng, 1.0, false);
  auto w = random_tensor({1, 1, 16, 16}, rng, 1.0, false);
  const Extents s{16, 16}, p{0, 0};
  auto out = conv2d(x, w, T2::zeros({1}), s, p);
  ASSERT_EQ(out.size(), 1u);
  double dot = 0;
  for (std::size_t i = 0; i < 256; ++i) dot += x[i] * w[i];
  EXPECT_NEAR(out[0], dot, 1e-12);
}

TEST(Conv, DeltaKernelIsIdentityOnValidRegion) {
  Rng rng(7);
  auto x = random_tensor({1, 6, 7}, rng, 1.0, false);
  auto w = T2::zeros({1, 1, 3, 3});
  w.mutable_values()[4] = 1.0;  // centre tap
  const Extents s{1, 1}, p{0, 0};
  auto out = conv2d(x, w, T2::zeros({1}), s, p);
  ASSERT_EQ(out.shape(), (Shape{1, 4, 5}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(out[i * 5 + j], x[(i + 1) * 7 + j + 1]);
}

TEST(Conv, ThreeDimensionalMatchesDirectSum) {
  Rng rng(8);
  auto x = random_tensor({2, 4, 5, 5}, rng, 1.0, false);
  auto w = random_tensor({3, 2, 2, 3, 3}, rng, 1.0, false);
  auto b = random_tensor({3}, rng, 1.0, false);
  const Extents s{2, 2, 2}, p{0, 1, 1};
  auto out = conv3d(x, w, b, s, p);
  ASSERT_EQ(out.shape(), (Shape{3, 2, 3, 3}));
  for (std::size_t co = 0; co < 3; ++co)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t ww = 0; ww < 3; ++ww) {
          double acc = b[co];
          for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t kt = 0; kt < 2; ++kt)
              for (std::size_t kh = 0; kh < 3; ++kh)
                for (std::size_t kw = 0; kw < 3; ++kw) {
                  long it = long(t * 2 + kt), ih = long(h * 2 + kh) - 1, iw = long(ww * 2 + kw) - 1;
                  if (ih < 0 || ih >= 5 || iw < 0 || iw >= 5) continue;
                  acc += x[((c * 4 + it) * 5 + ih) * 5 + iw] *
                         w[(((co * 2 + c) * 2 + kt) * 3 + kh) * 3 + kw];
                }
          EXPECT_NEAR(out[((co * 2 + t) * 3 + h) * 3 + ww], acc, 1e-12);
        }
}

TEST(Conv, PaddingDerivedFromDeclaredGrid) {
  EXPECT_EQ(derive_padding(128, 7, 4, 32), 2u);
  EXPECT_EQ(derive_padding(1024, 7, 4, 256), 2u);
  EXPECT_EQ(derive_padding(128, 16, 10, 12), 0u);
  EXPECT_EQ(derive_padding(1024, 16, 10, 101), 0u);
  EXPECT_THROW(derive_padding(128, 7, 4, 40), ConfigError);
}

TEST(PoolGrid, HalvesBothAxes) {
  Rng rng(9);
  const Extents g{32, 256}, s{2, 2};
  auto out = pool_grid(random_tensor({1 + 32 * 256, 3}, rng, 1.0, false), g, s, PoolMode::max, true);
  EXPECT_EQ(out.shape(), (Shape{1 + 16 * 128, 3}));
}

TEST(PoolGrid, TimeOnlyStride) {
  Rng rng(10);
  const Extents g{8, 64}, s{1, 2};
  EXPECT_EQ(pooled_extents(g, s), (Extents{8, 32}));
  auto out = pool_grid(random_tensor({8 * 64, 2}, rng, 1.0, false), g, s, PoolMode::avg, false);
  EXPECT_EQ(out.shape(), (Shape{8 * 32, 2}));
}

TEST(PoolGrid, UnitStrideIsIdentity) {
  Rng rng(11);
  auto x = random_tensor({1 + 12, 4}, rng, 1.0, false);
  const Extents g{3, 4}, s{1, 1};
  for (auto mode : {PoolMode::max, PoolMode::avg}) {
    auto out = pool_grid(x, g, s, mode, true);
    expect_values(out, vec(x.values()), 0.0);
  }
}

TEST(PoolGrid, ClassTokenBypassesPooling) {
  Rng rng(12);
  auto x = random_tensor({1 + 16, 3}, rng, 1.0, false);
  const Extents g{4, 4}, s{2, 2};
  auto out = pool_grid(x, g, s, PoolMode::max, true);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out[j], x[j]);
}

TEST(PoolGrid, NonDivisibleStrideIsConfigError) {
  const Extents g{5, 4}, s{2, 2};
  EXPECT_THROW(pool_grid(T2::zeros({20, 1}), g, s, PoolMode::max, false), ConfigError);
}

TEST(PoolGrid, AveragePreservesGrandMean) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Extents g{4, 6, 2}, s{2, 3, 1};
    auto x = random_tensor({48, 5}, rng, 1.0, false);
    auto out = pool_grid(x, g, s, PoolMode::avg, false);
    double in_mean = 0, out_mean = 0;
    for (double v : x.values()) in_mean += v / x.size();
    for (double v : out.values()) out_mean += v / out.size();
    EXPECT_NEAR(in_mean, out_mean, 1e-14);
  }
}

TEST(PoolGrid, MaxPicksWindowMaximum) {
  // 2x2 grid, one channel, no class token.
  auto out = pool_grid(T2({4, 1}, {1, 7, -2, 3}), Extents{2, 2}, Extents{2, 2}, PoolMode::max,
                       false);
  expect_values(out, {7}, 0.0);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(13);
  auto x = random_tensor({3, 4}, rng);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  Rng rng(14);
  auto x = random_tensor({5}, rng);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, NonScalarLossIsUsageError) {
  Rng rng(15);
  EXPECT_THROW(backward(random_tensor({2, 2}, rng)), UsageError);
}

TEST(Backward, GradShapeMatchesValue) {
  Rng rng(16);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  backward(sum(matmul(a, b)));
  EXPECT_EQ(a.grad().size(), a.size());
  EXPECT_EQ(b.grad().size(), b.size());
}

TEST(Backward, LeafGradientsAccumulateAcrossPasses) {
  Rng rng(17);
  auto x = random_tensor({3}, rng);
  backward(sum(x));
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Tape, TopologicalAndVisitsEachNodeOnce) {
  Rng rng(18);
  auto x = random_tensor({4, 4}, rng);
  auto w = random_tensor({4, 4}, rng);
  auto h = matmul(x, w);
  // Diamond: h feeds two branches that rejoin.
  auto loss = sum(add(gelu(h), mul(h, h)));
  auto tape = ComputationTape<double>::record(loss);
  EXPECT_TRUE(tape.is_topological());
  std::set<const void*> seen;
  for (auto* n : tape.nodes()) EXPECT_TRUE(seen.insert(n).second);
  EXPECT_EQ(tape.nodes().back(), loss.node());
}

TEST(Tape, NoGradGuardRecordsNothing) {
  Rng rng(19);
  auto x = random_tensor({3}, rng);
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Determinism, ForwardAndBackwardBitIdentical) {
  auto run = [] {
    Rng rng(20);
    auto x = random_tensor({6, 8}, rng);
    auto w = random_tensor({8, 8}, rng);
    auto g = T2::full({8}, 1.0, true);
    auto b = T2::zeros({8}, true);
    auto y = softmax_rows(layer_norm(gelu(matmul(x, w)), g, b));
    auto loss = probe(y, 1);
    backward(loss);
    auto all = vec(y.values());
    all.insert(all.end(), x.grad().begin(), x.grad().end());
    all.insert(all.end(), w.grad().begin(), w.grad().end());
    all.push_back(loss.item());
    return all;
  };
  EXPECT_EQ(run(), run());
}

// Finite-difference checks: every differentiable op, five seeds each.

TEST(GradCheck, Elementwise) {
  check_op("add", [](auto& l) { return add(l[0], l[1]); }, {{3, 4}, {3, 4}});
  check_op("sub", [](auto& l) { return sub(l[0], l[1]); }, {{3, 4}, {3, 4}});
  check_op("mul", [](auto& l) { return mul(l[0], l[1]); }, {{3, 4}, {3, 4}});
  check_op("scale", [](auto& l) { return scale(l[0], -1.7); }, {{5}});
  check_op("add_scalar", [](auto& l) { return mul(add_scalar(l[0], 0.3), l[0]); }, {{5}});
  check_op("add_bias", [](auto& l) { return add_bias(l[0], l[1]); }, {{3, 4}, {4}});
  check_op("gelu", [](auto& l) { return gelu(l[0]); }, {{4, 6}}, 2.0);
}

TEST(GradCheck, Reductions) {
  check_op("sum", [](auto& l) { return mul(sum(l[0]), sum(l[0])); }, {{3, 3}});
  check_op("mean", [](auto& l) { return mul(mean(l[0]), mean(l[0])); }, {{2, 5}});
}

TEST(GradCheck, Structural) {
  check_op("reshape", [](auto& l) { return mul(reshape(l[0], {6, 2}), l[1]); }, {{3, 4}, {6, 2}});
  check_op("transpose", [](auto& l) { return mul(transpose(l[0]), l[1]); }, {{3, 4}, {4, 3}});
  check_op("slice_rows", [](auto& l) { return slice_rows(mul(l[0], l[0]), 1, 3); }, {{4, 3}});
  check_op("slice_cols", [](auto& l) { return slice_cols(mul(l[0], l[0]), 1, 3); }, {{3, 4}});
  check_op("concat_rows", [](auto& l) { return mul(concat_rows<double>({l[0], l[1]}), l[2]); },
           {{2, 3}, {1, 3}, {3, 3}});
  check_op("concat_cols", [](auto& l) { return mul(concat_cols<double>({l[0], l[1]}), l[2]); },
           {{3, 2}, {3, 1}, {3, 3}});
}

TEST(GradCheck, MatmulAndSoftmax) {
  check_op("matmul", [](auto& l) { return matmul(l[0], l[1]); }, {{3, 4}, {4, 2}});
  check_op("softmax_rows", [](auto& l) { return softmax_rows(l[0]); }, {{3, 5}}, 2.0);
  check_op("log_softmax_rows", [](auto& l) { return log_softmax_rows(l[0]); }, {{3, 5}}, 2.0);
}

TEST(GradCheck, Normalisation) {
  check_op("layer_norm", [](auto& l) { return layer_norm(l[0], l[1], l[2]); },
           {{4, 6}, {6}, {6}});
  check_op("normalize_rows", [](auto& l) { return normalize_rows(l[0]); }, {{4, 5}});
}

TEST(GradCheck, Convolution) {
  const Extents s2{2, 2}, p2{1, 0};
  check_op("conv2d", [&](auto& l) { return conv2d(l[0], l[1], l[2], s2, p2); },
           {{2, 5, 6}, {3, 2, 3, 2}, {3}});
  const Extents s3{1, 2, 2}, p3{0, 1, 1};
  check_op("conv3d", [&](auto& l) { return conv3d(l[0], l[1], l[2], s3, p3); },
           {{2, 3, 4, 4}, {2, 2, 2, 3, 3}, {2}});
}

TEST(GradCheck, Pooling) {
  const Extents g{4, 6}, s{2, 3};
  // Continuous random inputs make max-pool ties measure-zero.
  check_op("pool max", [&](auto& l) { return pool_grid(l[0], g, s, PoolMode::max, true); },
           {{25, 3}});
  check_op("pool avg", [&](auto& l) { return pool_grid(l[0], g, s, PoolMode::avg, true); },
           {{25, 3}});
}

TEST(GradCheck, RelativePositionBias) {
  const Extents qg{2, 3}, kg{4, 3};
  auto index = RelPosIndex::build(qg, kg);
  check_op("rel_pos_bias",
           [&](auto& l) { return rel_pos_bias<double>({l[0], l[1]}, index, true); },
           {{7, index.rows[0]}, {7, index.rows[1]}});
}
