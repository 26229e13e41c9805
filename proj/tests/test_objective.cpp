#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "pclm/encoder.hpp"
#include "pclm/objective.hpp"
#include "test_util.hpp"

using namespace pclm;
using pclm::testing::random_tensor;

namespace {

ContrastiveBatch one_block(Tensor preds, Tensor pool, std::vector<std::size_t> pos) {
  ContrastiveBatch b;
  b.blocks.push_back({1, std::move(preds), std::move(pool), std::move(pos)});
  return b;
}

}  // namespace

TEST(InfoNce, UniformPoolGivesLogM) {
  Rng rng(1);
  for (std::size_t M : {1u, 2u, 4u, 12u, 64u}) {
    auto pool = random_tensor(rng, {M, 5});
    ContrastiveBatch b = one_block(Tensor({3, 5}), pool, {0, M - 1, M / 2});
    auto v = info_nce(b);
    EXPECT_EQ(v.terms, 3u);
    EXPECT_NEAR(v.per_term(), std::log(static_cast<double>(M)), 1e-9) << "M=" << M;
  }
}

TEST(InfoNce, EqualDotProductsOverFourCandidates) {
  // every candidate has the same projection onto the prediction
  auto pred = Tensor::matrix({{1.0, 0.0}});
  auto pool = Tensor::matrix({{0.7, 1.0}, {0.7, -3.0}, {0.7, 0.0}, {0.7, 2.5}});
  EXPECT_NEAR(info_nce(one_block(pred, pool, {2})).loss.item(), std::log(4.0), 1e-12);
}

TEST(InfoNce, SingleCandidateIsZero) {
  auto v = info_nce(one_block(Tensor::matrix({{3.0, -2.0}}), Tensor::matrix({{5.0, 1.0}}), {0}));
  EXPECT_EQ(v.loss.item(), 0.0);
}

TEST(InfoNce, ThreePairHandCase) {
  // Oracle: direct softmax cross-entropy at 40-digit precision.
  auto pred = Tensor::matrix({{1.0, 0.0}, {0.5, -1.0}, {2.0, 1.0}});
  auto pool = Tensor::matrix({{1.0, 1.0}, {-1.0, 0.5}, {0.3, 2.0}});
  auto v = info_nce(one_block(pred, pool, {0, 2, 1}));
  EXPECT_NEAR(v.loss.item(), 7.483075977678609631640588, 1e-12);
}

TEST(InfoNce, PositiveOutsidePoolIsContractError) {
  EXPECT_THROW(info_nce(one_block(Tensor({1, 2}), Tensor({3, 2}), {3})), ContractError);
  EXPECT_THROW(info_nce(one_block(Tensor({2, 2}), Tensor({3, 2}), {0})), ContractError);
}

TEST(InfoNce, PermutingThePoolLeavesLossUnchanged) {
  Rng rng(3);
  auto pred = random_tensor(rng, {4, 6}, -2, 2);
  auto pool = random_tensor(rng, {9, 6}, -2, 2);
  std::vector<std::size_t> pos{0, 3, 8, 3};
  const double base = info_nce(one_block(pred, pool, pos)).loss.item();
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 10; ++trial) {
    rng.shuffle(perm.begin(), perm.end());
    std::vector<std::size_t> where(9);
    for (std::size_t i = 0; i < 9; ++i) where[perm[i]] = i;
    std::vector<std::size_t> new_pos;
    for (auto p : pos) new_pos.push_back(where[p]);
    auto shuffled = embedding_lookup(pool, perm);
    EXPECT_NEAR(info_nce(one_block(pred, shuffled, new_pos)).loss.item(), base, 1e-12);
  }
}

TEST(InfoNce, LargeScoresStayFinite) {
  auto pred = Tensor::matrix({{100.0, 0.0}, {-100.0, 0.0}});
  auto pool = Tensor::matrix({{100.0, 0.0}, {-100.0, 0.0}, {50.0, 0.0}});
  auto v = info_nce(one_block(pred, pool, {1, 2}));
  EXPECT_TRUE(std::isfinite(v.loss.item()));
  // both terms are off by 2e4 and 1.5e4 from the best candidate
  EXPECT_NEAR(v.loss.item(), 2e4 + 1.5e4, 1e-6);
  auto perfect = info_nce(one_block(pred, pool, {0, 1}));
  EXPECT_GE(perfect.loss.item(), 0.0);
  EXPECT_LT(perfect.loss.item(), 1e-12);
}

TEST(InfoNce, NonNegative) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto v = info_nce(one_block(random_tensor(rng, {3, 4}, -3, 3), random_tensor(rng, {5, 4}, -3, 3),
                                {0, 1, 4}));
    EXPECT_GE(v.loss.item(), 0.0);
  }
}

TEST(CandidatePools, FourWindowsThreeSteps) {
  const std::size_t B = 4, T = 3, L = 2, d = 3;
  Rng rng(5);
  std::vector<std::vector<Tensor>> z(T);
  for (auto& step : z)
    for (std::size_t l = 0; l < L; ++l) step.push_back(random_tensor(rng, {B, d}));
  std::vector<PredictionPair> pairs;
  for (std::size_t t = 2; t <= T; ++t)
    for (std::size_t l = 1; l <= L; ++l) pairs.push_back({t, l, random_tensor(rng, {B, d}), z[t - 1][l - 1]});
  auto batch = build_candidate_pools(pairs, z);
  ASSERT_EQ(batch.blocks.size(), L);
  EXPECT_FALSE(batch.degenerate);
  EXPECT_EQ(batch.num_terms(), (T - 1) * L * B);
  for (const auto& blk : batch.blocks) {
    EXPECT_EQ(blk.pool_size(), 12u);
    // every pool row is a same-layer z vector, and each positive is the target row
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < d; ++j)
          EXPECT_EQ(blk.pool.at(t * B + b, j), z[t][blk.layer - 1].at(b, j));
    std::size_t p = 0;
    for (const auto& pr : pairs) {
      if (pr.layer != blk.layer) continue;
      for (std::size_t b = 0; b < B; ++b, ++p)
        for (std::size_t j = 0; j < d; ++j)
          EXPECT_EQ(blk.pool.at(blk.positives[p], j), pr.target.at(b, j));
    }
  }
}

TEST(CandidatePools, SinglePairIsDegenerate) {
  std::vector<std::vector<Tensor>> z{{Tensor::matrix({{1.0, 2.0}})}};
  std::vector<PredictionPair> pairs{{1, 1, Tensor::matrix({{4.0, -1.0}}), z[0][0]}};
  auto batch = build_candidate_pools(pairs, z);
  EXPECT_TRUE(batch.degenerate);
  EXPECT_EQ(batch.blocks[0].pool_size(), 1u);
  EXPECT_EQ(info_nce(batch).loss.item(), 0.0);
  EXPECT_THROW(build_candidate_pools({}, z), ContractError);
}

TEST(InfoNce, ChanceLevelAtInitialization) {
  EncoderConfig ec;
  ec.num_layers = 2;
  ec.hidden_dim = 16;
  ec.ffn_dim = 32;
  ec.max_len = 12;
  ec.vocab_size = 40;
  ParameterStore store;
  Rng rng(21);
  init_encoder(store, ec, rng);
  init_pathway(store, ec.hidden_dim, rng);
  auto enc = bind_encoder(store, ec);
  auto pw = bind_pathway(store);
  const std::size_t B = 8, T = 3;
  std::vector<std::vector<TokenId>> batch;
  for (std::size_t i = 0; i < B * T; ++i) {
    std::vector<TokenId> ids{kCls};
    for (int j = 0; j < 8; ++j) ids.push_back(static_cast<TokenId>(5 + rng.below(35)));
    ids.push_back(kSep);
    ids.resize(ec.max_len, kPad);
    batch.push_back(ids);
  }
  auto st = encode_batch(batch, enc, ec);
  std::vector<std::vector<Tensor>> z(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B; ++b) rows.push_back(b * T + t);
    for (std::size_t l = 0; l < ec.num_layers; ++l) z[t].push_back(embedding_lookup(st.z[l], rows));
  }
  auto cfg = PcConfig::for_mode(PcMode::full, ec.num_layers, 2);
  auto r = rollout(z, pw, cfg);
  auto pools = build_candidate_pools(r.pairs, z);
  // 4 pairs per window, 8 windows: 32 terms per batch; repeat for >= 100
  double total = 0.0;
  std::size_t terms = 0;
  for (int rep = 0; rep < 4; ++rep) {
    auto v = info_nce(pools);
    total += v.loss.item();
    terms += v.terms;
  }
  ASSERT_GE(terms, 100u);
  const double lnM = std::log(static_cast<double>(B * T));
  EXPECT_NEAR(total / terms, lnM, 0.15 * lnM);
}

TEST(MlmLoss, UniformLogitsGiveLogV) {
  auto v = mlm_loss(Tensor({3, 11}, 0.25), {5, 0, 10});
  EXPECT_NEAR(v.loss.item(), std::log(11.0), 1e-12);
}

TEST(MlmLoss, SaturatedSoftmax) {
  Tensor logits({2, 7});
  logits.mutable_data()[3] = 50.0;
  logits.mutable_data()[7 + 6] = 50.0;
  EXPECT_LT(mlm_loss(logits, {3, 6}).loss.item(), 1e-20);
}

TEST(MlmLoss, MatchesBruteForceCrossEntropy) {
  // Oracle: 40-digit evaluation of the mean cross-entropy for these rows.
  std::vector<double> vals;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 7; ++j) vals.push_back(((i * 7 + j) * 37 % 19) / 4.0 - 2.0);
  auto v = mlm_loss(Tensor({5, 7}, vals), {3, 0, 6, 2, 5});
  EXPECT_NEAR(v.loss.item(), 1.518090281296106002101867, 1e-12);
}

TEST(MlmLoss, NoMaskedPositions) {
  auto v = mlm_loss(Tensor({0, 9}), {});
  EXPECT_TRUE(v.empty);
  EXPECT_EQ(v.loss.item(), 0.0);
  EXPECT_THROW(mlm_loss(Tensor({2, 9}), {1}), ContractError);
}

TEST(TotalLoss, AddsAndChecksFiniteness) {
  EXPECT_EQ(total_loss(Tensor::scalar(0.0), Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(total_loss(Tensor::scalar(1.5), Tensor::scalar(2.5)).item(), 4.0);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(total_loss(Tensor::scalar(nan), Tensor::scalar(1.0)), NumericError);
  EXPECT_THROW(total_loss(Tensor::scalar(1.0), Tensor::scalar(INFINITY)), NumericError);
}

TEST(TotalLoss, GradientIsSumOfPartGradients) {
  Rng rng(30);
  auto w = random_tensor(rng, {3, 4}, -1, 1, true);
  auto x = random_tensor(rng, {2, 3});
  auto pool = random_tensor(rng, {5, 4});
  auto nsm_of = [&] { return info_nce(one_block(matmul(x, w), pool, {1, 4})).loss; };
  auto mlm_of = [&] { return mlm_loss(matmul(x, w), {0, 3}).loss; };
  auto grad_of = [&](auto fn) {
    w.zero_grad();
    Graph g;
    Tensor loss;
    {
      GraphScope s(g);
      loss = fn();
    }
    return backward(loss, g).get(w);
  };
  auto g_nsm = grad_of(nsm_of);
  auto g_mlm = grad_of(mlm_of);
  auto g_tot = grad_of([&] { return total_loss(nsm_of(), mlm_of()); });
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_NEAR(g_tot[i], g_nsm[i] + g_mlm[i], 1e-14);
}
