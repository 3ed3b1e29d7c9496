#include <cmath>

#include <gtest/gtest.h>

#include "mmbt/metrics.hpp"

using namespace mmbt;

namespace {

// Pair-counting form of the adjusted Rand index.
double ari_pairs(const Assignment& t, const Assignment& p) {
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t j = i + 1; j < t.size(); ++j) {
      const bool st = t[i] == t[j], sp = p[i] == p[j];
      n11 += st && sp, n10 += st && !sp, n01 += !st && sp, n00 += !st && !sp;
    }
  return 2 * (n00 * n11 - n01 * n10) / ((n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11));
}

// Entropies from per-sample frequencies.
double homogeneity_direct(const Assignment& t, const Assignment& p) {
  const double n = t.size();
  double hc = 0, hck = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    double same_c = 0, same_k = 0, same_ck = 0;
    for (std::size_t j = 0; j < t.size(); ++j) {
      same_c += t[j] == t[i];
      same_k += p[j] == p[i];
      same_ck += t[j] == t[i] && p[j] == p[i];
    }
    hc -= std::log(same_c / n) / n;
    hck -= std::log(same_ck / same_k) / n;
  }
  return 1 - hck / hc;
}

const Assignment kTruth{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2};
const Assignment kPred{0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 0, 2};

}  // namespace

TEST(ClusterScores, IdenticalPartitionsScoreOne) {
  EXPECT_EQ(adjusted_rand_index(kTruth, kTruth), 1.0);
  EXPECT_EQ(homogeneity_score(kTruth, kTruth), 1.0);
  // Relabelled clusters are the same partition.
  Assignment renamed{7, 7, 7, 7, 3, 3, 3, 3, 5, 5, 5, 5};
  EXPECT_EQ(adjusted_rand_index(kTruth, renamed), 1.0);
  EXPECT_EQ(homogeneity_score(kTruth, renamed), 1.0);
}

TEST(ClusterScores, SingleClusterScoresZero) {
  Assignment one(12, 0);
  EXPECT_EQ(adjusted_rand_index(kTruth, one), 0.0);
  EXPECT_EQ(homogeneity_score(kTruth, one), 0.0);
}

TEST(ClusterScores, TwelveSampleOracle) {
  EXPECT_NEAR(adjusted_rand_index(kTruth, kPred), ari_pairs(kTruth, kPred), 1e-12);
  EXPECT_NEAR(homogeneity_score(kTruth, kPred), homogeneity_direct(kTruth, kPred), 1e-12);
  // Reference values frozen from scikit-learn 1.x.
  EXPECT_NEAR(adjusted_rand_index(kTruth, kPred), 0.21160409556313994, 1e-12);
  EXPECT_NEAR(homogeneity_score(kTruth, kPred), 0.42928444851037806, 1e-12);
  Assignment t2{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2}, p2{5, 5, 5, 7, 7, 7, 7, 9, 9, 9, 9, 5};
  EXPECT_NEAR(adjusted_rand_index(t2, p2), -0.14583333333333334, 1e-12);
  EXPECT_NEAR(homogeneity_score(t2, p2), 0.053605369642813865, 1e-12);
}

TEST(ClusterScores, RandomPartitionsMatchPairCounting) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 6 + rng.index(30), kc = 2 + rng.index(4), kp = 2 + rng.index(5);
    Assignment t(n), p(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = rng.index(kc), p[i] = rng.index(kp);
    t[0] = 0, t[1] = 1;  // at least two classes
    const double oracle = ari_pairs(t, p);
    if (std::isfinite(oracle)) EXPECT_NEAR(adjusted_rand_index(t, p), oracle, 1e-12);
    EXPECT_NEAR(homogeneity_score(t, p), homogeneity_direct(t, p), 1e-12);
    const double hs = homogeneity_score(t, p);
    EXPECT_GE(hs, -1e-12);
    EXPECT_LE(hs, 1 + 1e-12);
  }
}

TEST(ClusterScores, SymmetryOfAri) {
  EXPECT_NEAR(adjusted_rand_index(kTruth, kPred), adjusted_rand_index(kPred, kTruth), 1e-15);
}

TEST(KMeans, RecoversSeparatedBlobs) {
  Rng rng(2);
  Embeddings x;
  Assignment labels;
  for (std::size_t c = 0; c < 4; ++c)
    for (int i = 0; i < 10; ++i) {
      x.push_back({10.0 * c + rng.normal(0, 0.3), (c % 2 ? 5.0 : -5.0) + rng.normal(0, 0.3)});
      labels.push_back(c);
    }
  auto m = cluster_metrics(x, labels, 4, 3);
  EXPECT_EQ(m.ari, 1.0);
  EXPECT_EQ(m.homogeneity, 1.0);
  auto again = cluster_metrics(x, labels, 4, 3);
  EXPECT_EQ(again.clusters, m.clusters);
}

TEST(KMeans, InertiaNeverWorseThanSingleRestart) {
  Rng rng(4);
  Embeddings x(60, std::vector<double>(3));
  for (auto& row : x)
    for (auto& v : row) v = rng.normal();
  EXPECT_LE(kmeans(x, 5, 9, 10).inertia, kmeans(x, 5, 9, 1).inertia);
}

TEST(KMeans, RejectsTooFewSamples) {
  EXPECT_THROW(kmeans(Embeddings{{0.0}, {1.0}}, 3, 0), InputError);
  EXPECT_THROW(cluster_metrics(Embeddings{{0.0}, {1.0}}, {0, 1}, 3), InputError);
  EXPECT_THROW(kmeans(Embeddings{{0.0}, {1.0}}, 1, 0), InputError);
}

TEST(Accuracy, TopOneAndTopFive) {
  std::vector<std::vector<double>> s{{0.1, 0.5, 0.2, 0.0, 0.0, 0.0, 0.2},
                                     {0.9, 0.05, 0.05, 0, 0, 0, 0},
                                     {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6}};
  Assignment y{1, 1, 0};
  EXPECT_NEAR(top_k_accuracy(s, y, 1), 1.0 / 3, 1e-15);
  EXPECT_NEAR(top_k_accuracy(s, y, 2), 2.0 / 3, 1e-15);
  EXPECT_NEAR(top_k_accuracy(s, y, 5), 2.0 / 3, 1e-15);
  EXPECT_EQ(top_k_accuracy(s, y, 7), 1.0);
}

TEST(Accuracy, ConstantPredictionEqualsPrevalence) {
  std::vector<std::vector<double>> s(10, {0.1, 0.7, 0.2});
  Assignment y{1, 0, 1, 2, 1, 0, 0, 1, 2, 2};
  EXPECT_NEAR(top_k_accuracy(s, y, 1), 0.4, 1e-15);
  EXPECT_THROW(top_k_accuracy(s, Assignment{3, 0, 1, 2, 1, 0, 0, 1, 2, 2}, 1), InputError);
}
