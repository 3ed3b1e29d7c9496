#include <cmath>

#include <gtest/gtest.h>

#include "mmbt/encoder.hpp"
#include "mmbt/gradcheck.hpp"
#include "test_util.hpp"

using namespace mmbt;
using mmbt::testing::load_schedule;
using mmbt::testing::random_tensor;
using mmbt::testing::randomize;

namespace {

using T2 = Tensor<double>;

/// Row-major dense matrix from a tensor, used by the loop oracles below.
std::vector<std::vector<double>> rows_of(const T2& t) {
  std::vector<std::vector<double>> out(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) out[i][j] = t.at(i, j);
  return out;
}

std::vector<std::vector<double>> project(const std::vector<std::vector<double>>& a,
                                         const std::vector<std::vector<double>>& w) {
  std::vector<std::vector<double>> out(a.size(), std::vector<double>(w[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < w.size(); ++k)
      for (std::size_t j = 0; j < w[0].size(); ++j) out[i][j] += a[i][k] * w[k][j];
  return out;
}

/// softmax(q k^T / sqrt(d)) v, written with plain loops.
std::vector<std::vector<double>> plain_attention(const std::vector<std::vector<double>>& q,
                                                 const std::vector<std::vector<double>>& k,
                                                 const std::vector<std::vector<double>>& v) {
  const double s = 1.0 / std::sqrt(double(q[0].size()));
  std::vector<std::vector<double>> out(q.size(), std::vector<double>(v[0].size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> logits(k.size());
    double mx = -1e300;
    for (std::size_t j = 0; j < k.size(); ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < q[i].size(); ++c) dot += q[i][c] * k[j][c];
      logits[j] = dot * s;
      mx = std::max(mx, logits[j]);
    }
    double z = 0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    for (std::size_t j = 0; j < k.size(); ++j)
      for (std::size_t c = 0; c < v[0].size(); ++c) out[i][c] += logits[j] / z * v[j][c];
  }
  return out;
}

const RelPosTable<double>* const kNoRel = nullptr;

T2 probe(const T2& out, std::uint64_t seed) {
  Rng rng(seed + 77);
  std::vector<double> w(out.size());
  for (auto& x : w) x = rng.normal();
  return weighted_sum(out, w);
}

TokenSet<double> random_tokens(const Extents& grid, std::size_t d, Rng& rng, bool cls = true) {
  return {random_tensor({numel(grid) + (cls ? 1 : 0), d}, rng, 1.0, false), grid, cls};
}

}  // namespace

TEST(MsAttnHead, IdentityPoolsZeroTablesMatchPlainAttentionOracle) {
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Extents grid{3, 4};
    const std::size_t d = 6, dh = 5;
    auto a = random_tokens(grid, d, rng);
    auto wq = random_tensor({d, dh}, rng, 0.5, false);
    auto wk = random_tensor({d, dh}, rng, 0.5, false);
    auto wv = random_tensor({d, dh}, rng, 0.5, false);
    auto rel = RelPosTable<double>::zeros({5, 7}, dh);
    auto out = msattn_head(a, wq, wk, wv, {}, {}, {}, &rel);
    ASSERT_EQ(out.extents, grid);

    const auto A = rows_of(a.tokens);
    const auto q = project(A, rows_of(wq));
    const auto expect = plain_attention(q, project(A, rows_of(wk)), project(A, rows_of(wv)));
    for (std::size_t i = 0; i < expect.size(); ++i)
      for (std::size_t c = 0; c < dh; ++c)
        EXPECT_NEAR(out.tokens.at(i, c) - q[i][c], expect[i][c], 1e-10);
  }
}

TEST(MsAttnHead, QueryStrideHalvesMatGrid) {
  NoGradGuard no_grad;
  Rng rng(1);
  const Extents grid{32, 256};
  auto a = random_tokens(grid, 4, rng);
  auto w = random_tensor({4, 4}, rng, 0.5, false);
  auto out = msattn_head(a, w, w, w, PoolSpec{{2, 2}, PoolMode::max}, PoolSpec{{2, 2}},
                         PoolSpec{{2, 2}}, kNoRel);
  EXPECT_EQ(out.extents, (Extents{16, 128}));
  EXPECT_EQ(out.tokens.dim(0), 1u + 16 * 128);
}

TEST(MsAttnHead, SingleTokenGivesQueryPlusValue) {
  Rng rng(2);
  TokenSet<double> a{random_tensor({1, 4}, rng, 1.0, false), {1, 1}, false};
  auto wq = random_tensor({4, 3}, rng, 1.0, false);
  auto wk = random_tensor({4, 3}, rng, 1.0, false);
  auto wv = random_tensor({4, 3}, rng, 1.0, false);
  auto rel = RelPosTable<double>::zeros({1, 1}, 3);
  auto out = msattn_head(a, wq, wk, wv, {}, {}, {}, &rel);
  auto q = matmul(a.tokens, wq), v = matmul(a.tokens, wv);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.tokens[c], q[c] + v[c]);
}

TEST(MsAttnHead, ZeroValueWeightsLeaveQueryResidual) {
  Rng rng(3);
  const Extents grid{4, 4};
  auto a = random_tokens(grid, 5, rng);
  auto wq = random_tensor({5, 5}, rng, 1.0, false);
  auto wk = random_tensor({5, 5}, rng, 1.0, false);
  auto rel = RelPosTable<double>::zeros({3, 3}, 5);
  const PoolSpec pq{{2, 2}, PoolMode::max};
  auto out = msattn_head(a, wq, wk, T2::zeros({5, 5}), pq, pq, pq, &rel);
  auto q = pool_grid(matmul(a.tokens, wq), grid, pq.stride, PoolMode::max, true);
  ASSERT_EQ(out.tokens.size(), q.size());
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_EQ(out.tokens[i], q[i]);
}

TEST(MsAttnHead, StrideInconsistentWithGridIsConfigError) {
  Rng rng(4);
  auto a = random_tokens({3, 4}, 2, rng);
  auto w = random_tensor({2, 2}, rng, 1.0, false);
  EXPECT_THROW(msattn_head(a, w, w, w, PoolSpec{{2, 2}}, {}, {}, kNoRel), ConfigError);
  EXPECT_THROW(msattn_head(a, w, w, w, {}, PoolSpec{{1, 2}}, {}, kNoRel), ConfigError);
}

TEST(MsAttnHead, PermutingTokensWithZeroTablesPermutesOutputs) {
  Rng rng(5);
  const Extents grid{2, 3};
  auto a = random_tokens(grid, 4, rng);
  auto w = random_tensor({4, 4}, rng, 1.0, false);
  auto rel = RelPosTable<double>::zeros({3, 5}, 4);
  // Swap grid tokens 1 and 4 (rows 2 and 5 with the class token first).
  std::vector<double> swapped(a.tokens.values().begin(), a.tokens.values().end());
  for (std::size_t c = 0; c < 4; ++c) std::swap(swapped[2 * 4 + c], swapped[5 * 4 + c]);
  TokenSet<double> b{T2({7, 4}, swapped), grid, true};
  auto oa = msattn_head(a, w, w, w, {}, {}, {}, &rel).tokens;
  auto ob = msattn_head(b, w, w, w, {}, {}, {}, &rel).tokens;
  for (std::size_t r = 0; r < 7; ++r) {
    std::size_t src = r == 2 ? 5 : r == 5 ? 2 : r;
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(ob.at(r, c), oa.at(src, c), 1e-12);
  }
}

TEST(RelPos, BiasDependsOnlyOnCoordinateOffsets) {
  // Every query row identical, so the bias of (i, j) can only depend on the
  // per-axis offsets t(i) - t(j), f(i) - f(j).
  Rng rng(6);
  const Extents grid{3, 4};
  const std::size_t n = 12, dh = 3;
  auto index = RelPosIndex::build(grid, grid);
  ASSERT_EQ(index.rows, (std::vector<std::size_t>{5, 7}));
  auto r0 = random_tensor({5, dh}, rng, 1.0, false), r1 = random_tensor({7, dh}, rng, 1.0, false);
  auto q_row = random_tensor({1, dh}, rng, 1.0, false);
  std::vector<T2> rows(n + 1, q_row);
  auto q = concat_rows(rows);
  auto bias = rel_pos_bias<double>({matmul(q, transpose(r0)), matmul(q, transpose(r1))}, index, true);
  auto coord = [&](std::size_t i) { return std::pair<long, long>(i / 4, i % 4); };
  for (std::size_t j = 0; j <= n; ++j) {
    EXPECT_EQ(bias.at(0, j), 0.0);
    EXPECT_EQ(bias.at(j, 0), 0.0);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      auto [ti, fi] = coord(i);
      auto [tj, fj] = coord(j);
      // Direct formula: Q . (R0[ti - tj + 2] + R1[fi - fj + 3]).
      double want = 0;
      for (std::size_t c = 0; c < dh; ++c)
        want += q_row[c] * (r0[(ti - tj + 2) * dh + c] + r1[(fi - fj + 3) * dh + c]);
      EXPECT_NEAR(bias.at(i + 1, j + 1), want, 1e-12);
    }
}

TEST(RelPos, PooledKeysScaleOntoFinerGrid) {
  // Query grid 4, key grid 2 (key stride 2): offsets are taken in query units.
  auto index = RelPosIndex::build(Extents{4}, Extents{2});
  ASSERT_EQ(index.rows, (std::vector<std::size_t>{7}));
  for (std::size_t qc = 0; qc < 4; ++qc)
    for (std::size_t kc = 0; kc < 2; ++kc)
      EXPECT_EQ(index.lookup[0][qc * 2 + kc], qc - 2 * kc + 2);
  // Coarser queries over finer keys.
  auto coarse = RelPosIndex::build(Extents{2}, Extents{4});
  for (std::size_t qc = 0; qc < 2; ++qc)
    for (std::size_t kc = 0; kc < 4; ++kc)
      EXPECT_EQ(coarse.lookup[0][qc * 4 + kc], 2 * qc - kc + 3);
}

TEST(RelPos, TablesCoverEveryOffset) {
  for (std::size_t q : {1, 2, 4, 8, 32})
    for (std::size_t k : {1, 2, 4, 8, 32}) {
      if (std::max(q, k) % std::min(q, k) != 0) continue;
      auto idx = RelPosIndex::build(Extents{q}, Extents{k});
      std::vector<bool> hit(idx.rows[0], false);
      for (auto r : idx.lookup[0]) {
        ASSERT_LT(r, idx.rows[0]);
        hit[r] = true;
      }
      if (q == k) EXPECT_TRUE(std::all_of(hit.begin(), hit.end(), [](bool b) { return b; }));
    }
}

TEST(MatBlock, PlainBlockKeepsGridAndWidth) {
  auto sched = load_schedule("mat-tiny");
  Rng rng(7);
  MultiScaleBlock<double> block(sched.blocks[2], sched.geometry(2), {}, rng);
  auto out = block(random_tokens({4, 16}, 16, rng));
  EXPECT_EQ(out.extents, (Extents{4, 16}));
  EXPECT_EQ(out.width(), 16u);
}

TEST(MatBlock, TimeOnlyTransitionDoublesWidth) {
  auto sched = load_schedule("mat");
  const auto geo = sched.geometry(21);
  EXPECT_EQ(geo.d_in, 384u);
  EXPECT_EQ(geo.d_out, 768u);
  EXPECT_EQ(geo.in_grid, (Extents{8, 64}));
  EXPECT_EQ(geo.q_grid, (Extents{8, 32}));
  // Same transition at 1/48 width keeps the forward cheap.
  auto small = sched.scaled_width(48);
  Rng rng(8);
  NoGradGuard no_grad;
  MultiScaleBlock<float> block(small.blocks[21], small.geometry(21), {}, rng);
  TokenSet<float> a{random_tensor<float>({1 + 8 * 64, 8}, rng, 1.0, false), {8, 64}, true};
  auto out = block(a);
  EXPECT_EQ(out.width(), 16u);
  EXPECT_EQ(out.extents, (Extents{8, 32}));
}

TEST(MatBlock, ZeroSecondMlpLayerLeavesAttentionStage) {
  auto sched = load_schedule("mat-tiny");
  Rng rng(9);
  MultiScaleBlock<double> block(sched.blocks[1], sched.geometry(1), {}, rng);
  for (auto& v : block.mlp().fc2.weight.mutable_values()) v = 0;
  auto a = random_tokens({8, 32}, 8, rng);
  auto mid = block.attention_stage(a);
  auto out = block(a);
  ASSERT_EQ(out.tokens.size(), mid.tokens.size());
  for (std::size_t i = 0; i < out.tokens.size(); ++i) EXPECT_EQ(out.tokens[i], mid.tokens[i]);
}

TEST(MatBlock, WrongInputGridIsConfigError) {
  auto sched = load_schedule("mat-tiny");
  Rng rng(10);
  MultiScaleBlock<double> block(sched.blocks[0], sched.geometry(0), {}, rng);
  EXPECT_THROW(block(random_tokens({4, 8}, 8, rng)), ConfigError);
}

TEST(Schedule, MatLedgerMatchesTable) {
  auto s = load_schedule("mat");
  ASSERT_EQ(s.blocks.size(), 24u);
  EXPECT_EQ(s.patch.channels, 96u);
  EXPECT_EQ(s.patch.grid, (Extents{32, 256}));
  EXPECT_EQ(s.patch.padding, (Extents{2, 2}));
  for (std::size_t i = 0; i < 24; ++i) {
    std::size_t c = i < 2 ? 96 : i < 5 ? 192 : i < 21 ? 384 : 768;
    Extents g = i < 2 ? Extents{32, 256} : i < 5 ? Extents{16, 128} : i < 21 ? Extents{8, 64}
                                                                           : Extents{8, 32};
    EXPECT_EQ(s.blocks[i].channels, c) << "block " << i;
    EXPECT_EQ(s.blocks[i].grid, g) << "block " << i;
    EXPECT_EQ(s.blocks[i].heads, c / 96) << "block " << i;
  }
}

TEST(Schedule, AstIsTwelvePlainBlocks) {
  auto s = load_schedule("ast");
  ASSERT_EQ(s.blocks.size(), 12u);
  EXPECT_EQ(numel(s.patch.grid) + 1, 1213u);
  EXPECT_EQ(numel(s.patch.grid), 1212u);
  for (const auto& b : s.blocks) {
    EXPECT_EQ(b.attention, AttentionKind::plain);
    EXPECT_EQ(b.channels, 768u);
    EXPECT_EQ(numel(b.grid), 1212u);
  }
}

TEST(Schedule, FirstViolatedRuleIsReported) {
  const std::string base = R"({"name": "bad", "input": {"extent": [8, 8]},
    "patch_embed": {"channels": 4, "kernel": [2, 2], "stride": [2, 2], "grid": [4, 4]},
    "blocks": [BLOCKS]})";
  auto with = [&](const std::string& blocks) {
    auto s = base;
    s.replace(s.find("BLOCKS"), 6, blocks);
    return s;
  };
  auto message = [&](const std::string& blocks) {
    try {
      StageSchedule::parse(with(blocks));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(R"({"channels": 4, "grid": [2, 2], "attention": "pooled", "q_stride": [2, 2]},
                       {"channels": 4, "grid": [4, 4]})")
                .find("block 1: expected grid"),
            std::string::npos);
  EXPECT_NE(message(R"({"channels": 8, "grid": [4, 4]})").find("at a plain block"),
            std::string::npos);
  EXPECT_NE(message(R"({"channels": 6, "heads": 4, "grid": [4, 4]})").find("heads"),
            std::string::npos);
  EXPECT_NE(message(R"({"channels": 4, "grid": [2, 2], "attention": "plain", "q_stride": [2, 2]})")
                .find("disagrees"),
            std::string::npos);
  EXPECT_NE(message(R"({"channels": 4, "grid": [4, 4], "kv_stride": [3, 1]})").find("divide"),
            std::string::npos);
  EXPECT_EQ(message(R"({"channels": 4, "grid": [4, 4], "repeat": 3})"), "no error");
}

TEST(Schedule, HashIgnoresFormattingButNotContent) {
  auto s = load_schedule("mat-tiny");
  auto reparsed = StageSchedule::parse(s.to_json().dump(2));
  EXPECT_EQ(s.hash(), reparsed.hash());
  auto other = s;
  other.blocks[0].heads = 2;
  EXPECT_NE(s.hash(), other.hash());
}

TEST(Encoder, PatchEmbedTokenCounts) {
  NoGradGuard no_grad;
  Rng rng(11);
  auto mat = build_mat<float>(load_schedule("mat").scaled_width(48), rng);
  auto x = random_tensor<float>({1, 128, 1024}, rng, 1.0, false);
  auto tokens = mat.embed(x);
  EXPECT_EQ(tokens.rows(), 8193u);
  EXPECT_EQ(tokens.width(), 2u);

  auto ast = build_mat<float>(load_schedule("ast").scaled_width(64), rng);
  auto at = ast.embed(x);
  EXPECT_EQ(at.rows(), 1213u);
  EXPECT_EQ(at.extents, (Extents{12, 101}));
}

TEST(Encoder, ZeroSpectrogramGivesBiasTokens) {
  auto sched = load_schedule("mat-tiny");
  Rng rng(12);
  auto enc = build_mat<double>(sched, rng);
  auto bias = enc.parameters()[1].tensor;
  for (auto& v : bias.mutable_values()) v = rng.normal();
  auto tokens = enc.embed(T2::zeros({1, 32, 128})).grid_tokens();
  for (std::size_t r = 0; r < tokens.dim(0); ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(tokens.at(r, c), bias[c]);
}

TEST(Encoder, InputExtentMismatchIsConfigError) {
  Rng rng(13);
  auto enc = build_mat<double>(load_schedule("mat-tiny"), rng);
  EXPECT_THROW(enc(T2::zeros({1, 32, 64})), ConfigError);
  EXPECT_THROW(build_video_encoder<double>(load_schedule("mat-tiny"), rng), ConfigError);
}

TEST(Encoder, ScaledMatLedgerFollowsTable) {
  NoGradGuard no_grad;
  Rng rng(14);
  auto enc = build_mat<float>(load_schedule("mat").scaled_width(48), rng);
  std::vector<LedgerEntry> ledger;
  auto out = enc(random_tensor<float>({1, 128, 1024}, rng, 1.0, false), &ledger);
  ASSERT_EQ(ledger.size(), 25u);
  EXPECT_EQ(ledger[0].grid, (Extents{32, 256}));
  EXPECT_EQ(ledger[3].grid, (Extents{16, 128}));
  EXPECT_EQ(ledger[3].channels, 4u);
  EXPECT_EQ(ledger[6].grid, (Extents{8, 64}));
  EXPECT_EQ(ledger[22].grid, (Extents{8, 32}));
  EXPECT_EQ(ledger[22].channels, 16u);
  EXPECT_EQ(out.width(), 16u);
  EXPECT_TRUE(all_finite(out.tokens));
}

TEST(Encoder, VideoTinyShapesAndZeroClip) {
  Rng rng(15);
  auto enc = build_video_encoder<double>(load_schedule("video-tiny"), rng);
  std::vector<LedgerEntry> ledger;
  auto out = enc(T2::zeros({3, 4, 32, 32}), &ledger);
  EXPECT_EQ(ledger[0].grid, (Extents{2, 8, 8}));
  EXPECT_EQ(ledger[2].grid, (Extents{2, 4, 4}));
  EXPECT_EQ(out.width(), 16u);
  EXPECT_TRUE(all_finite(out.class_token()));
}

TEST(Encoder, DefaultVideoScheduleShapes) {
  auto s = load_schedule("video");
  EXPECT_EQ(s.patch.padding, (Extents{1, 2, 2}));
  EXPECT_EQ(s.final_channels(), 768u);
  EXPECT_EQ(pooled_extents(Extents{8, 16, 16}, Extents{1, 2, 2}), (Extents{8, 8, 8}));
  NoGradGuard no_grad;
  Rng rng(16);
  auto enc = build_video_encoder<float>(s.scaled_width(48), rng);
  auto out = enc(random_tensor<float>({3, 16, 64, 64}, rng, 1.0, false));
  EXPECT_EQ(out.extents, (Extents{8, 2, 2}));
  EXPECT_EQ(out.width(), 16u);
}

TEST(Encoder, MatTinyGradientCheck) {
  auto sched = load_schedule("mat-tiny");
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    auto enc = build_mat<double>(sched, rng);
    auto params = enc.parameters();
    randomize(params, rng, 0.3);
    auto x = random_tensor({1, 32, 128}, rng, 1.0, true);
    params.push_back({"input", x});
    auto r = gradcheck([&] { return probe(enc(x).class_token(), seed); }, params,
                       {.max_entries_per_leaf = 6, .seed = std::uint64_t(seed)});
    EXPECT_TRUE(r.passed(1e-4)) << "seed " << seed << ": " << r.max_rel_error << " at "
                                << r.worst_leaf << "[" << r.worst_index << "]";
  }
}

TEST(Encoder, DeterministicForward) {
  auto run = [] {
    Rng rng(17);
    auto enc = build_mat<double>(load_schedule("mat-tiny"), rng);
    auto out = enc(random_tensor({1, 32, 128}, rng, 1.0, false));
    return std::vector<double>(out.tokens.values().begin(), out.tokens.values().end());
  };
  EXPECT_EQ(run(), run());
}
