#include <gtest/gtest.h>

#include "pclm/encoder.hpp"
#include "test_util.hpp"

using namespace pclm;
using pclm::testing::bit_equal;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.num_layers = 2;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 12;
  c.max_len = 10;
  c.vocab_size = 20;
  c.dropout = 0.1;
  return c;
}

std::vector<TokenId> seq(std::initializer_list<TokenId> body, std::size_t len) {
  std::vector<TokenId> ids{kCls};
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(kSep);
  ids.resize(len, kPad);
  return ids;
}

EncodeOptions train_opts(Rng* rng) {
  EncodeOptions o;
  o.mode = Mode::train;
  o.dropout_rng = rng;
  return o;
}

struct Model {
  EncoderConfig cfg;
  ParameterStore store;
  EncoderWeights w;

  explicit Model(EncoderConfig c, std::uint64_t seed = 11) : cfg(c) {
    Rng rng(seed);
    init_encoder(store, cfg, rng);
    w = bind_encoder(store, cfg);
  }
};

}  // namespace

TEST(Encoder, OutputShapes) {
  Model m(small_config());
  auto st = encode_batch({seq({5, 6, 7}, 10), seq({8}, 10), seq({9, 10}, 10)}, m.w, m.cfg);
  ASSERT_EQ(st.num_layers(), 2u);
  for (const auto& z : st.z) EXPECT_EQ(z.shape(), (Shape{3, 8}));
  EXPECT_EQ(st.final_hidden.shape(), (Shape{30, 8}));
  EXPECT_EQ(st.cls_matrix(1).shape(), (Shape{2, 8}));
}

TEST(Encoder, EvalModeIsDeterministic) {
  Model m(small_config());
  auto ids = seq({5, 6, 7, 8}, 10);
  auto a = encode_batch({ids}, m.w, m.cfg);
  auto b = encode_batch({ids}, m.w, m.cfg);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_TRUE(bit_equal(a.z[l], b.z[l]));
}

TEST(Encoder, TrainModeDropoutFollowsItsRng) {
  Model m(small_config());
  auto ids = seq({5, 6, 7, 8}, 10);
  Rng r1(3), r2(3), r3(4);
  auto a = encode_batch({ids}, m.w, m.cfg, train_opts(&r1));
  auto b = encode_batch({ids}, m.w, m.cfg, train_opts(&r2));
  auto c = encode_batch({ids}, m.w, m.cfg, train_opts(&r3));
  EXPECT_TRUE(bit_equal(a.z[1], b.z[1]));
  EXPECT_FALSE(bit_equal(a.z[1], c.z[1]));
  EXPECT_THROW(encode_batch({ids}, m.w, m.cfg, train_opts(nullptr)), ContractError);
}

TEST(Encoder, LaterTokenReachesClsButNotEmbeddingRow) {
  auto cfg = small_config();
  cfg.num_layers = 2;
  cfg.hidden_dim = 4;
  cfg.num_heads = 1;
  cfg.max_len = 6;
  Model m(cfg);
  EncodeOptions opts;
  opts.keep_layer_outputs = true;
  auto a = encode_batch({seq({5, 6, 7}, 6)}, m.w, cfg, opts);
  auto b = encode_batch({seq({5, 6, 9}, 6)}, m.w, cfg, opts);
  // position 0 of the embedding output depends only on [CLS]
  auto row0 = [](const Tensor& t) { return slice(t, 0, 0, 1); };
  EXPECT_TRUE(bit_equal(row0(a.layer_outputs[0]), row0(b.layer_outputs[0])));
  EXPECT_FALSE(bit_equal(a.z[1], b.z[1]));
}

TEST(Encoder, PaddedKeysAreIgnored) {
  Model m(small_config());
  auto a = seq({5, 6}, 10);
  auto b = a;
  b[8] = 12;
  b[9] = 13;
  // Same mask for both: the extra tokens in b sit behind -inf scores.
  EncodeOptions opts;
  opts.key_mask = attention_mask({a});
  auto sa = encode_batch({a}, m.w, m.cfg, opts);
  auto sb = encode_batch({b}, m.w, m.cfg, opts);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_TRUE(bit_equal(sa.z[l], sb.z[l]));
}

TEST(Encoder, ClsRowsMatchLayerOutputs) {
  Model m(small_config());
  EncodeOptions opts;
  opts.keep_layer_outputs = true;
  auto st = encode_batch({seq({5}, 10), seq({6, 7}, 10)}, m.w, m.cfg, opts);
  ASSERT_EQ(st.layer_outputs.size(), 3u);
  for (std::size_t l = 1; l <= 2; ++l) {
    for (std::size_t b = 0; b < 2; ++b) {
      EXPECT_TRUE(bit_equal(slice(st.z[l - 1], 0, b, 1), slice(st.layer_outputs[l], 0, b * 10, 1)));
    }
  }
}

TEST(Encoder, EveryParameterReceivesGradient) {
  Model m(small_config());
  Graph g;
  Tensor loss;
  {
    GraphScope scope(g);
    auto st = encode_batch({seq({5, 6, 7}, 10), seq({8, 9}, 10)}, m.w, m.cfg);
    std::vector<std::size_t> rows{2, 13};
    Tensor logits = mlm_logits(st.final_hidden, rows, m.w);
    loss = add(sum_all(multiply(st.z[0], st.z[1])), sum_all(multiply(logits, logits)));
  }
  auto grads = backward(loss, g);
  for (const auto& [name, t] : m.store.tensors()) {
    const Tensor gt = grads.get(t);
    double norm = 0.0;
    for (double v : gt.data()) norm += v * v;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Encoder, RejectsBadInput) {
  Model m(small_config());
  auto ids = seq({5}, 10);
  ids[3] = 20;
  EXPECT_THROW(encode_batch({ids}, m.w, m.cfg), ContractError);
  EXPECT_THROW(encode_batch({seq({5}, 9)}, m.w, m.cfg), ContractError);
  EXPECT_THROW(encode_batch({}, m.w, m.cfg), ContractError);
}

TEST(Encoder, StoreShapeMismatchIsConfigError) {
  Model m(small_config());
  auto other = small_config();
  other.vocab_size = 25;
  EXPECT_THROW(bind_encoder(m.store, other), ConfigError);
  EXPECT_THROW(bind_encoder(ParameterStore{}, other), MissingTensorError);
}

TEST(MlmHead, ZeroWeightsGiveOutputBias) {
  Model m(small_config());
  for (auto& [name, t] : m.store.tensors()) {
    if (name.starts_with("encoder.mlm.transform") || name == "encoder.embeddings.word") {
      for (double& v : t.mutable_data()) v = 0.0;
    }
  }
  auto& bias = m.store.get_mut("encoder.mlm.output_bias");
  for (std::size_t i = 0; i < bias.numel(); ++i) bias.mutable_data()[i] = 0.1 * i;
  Rng rng(1);
  auto hidden = pclm::testing::random_tensor(rng, {4, 8});
  std::vector<std::size_t> rows{0, 3};
  auto logits = mlm_logits(hidden, rows, m.w);
  ASSERT_EQ(logits.shape(), (Shape{2, 20}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t v = 0; v < 20; ++v) EXPECT_DOUBLE_EQ(logits.at(r, v), 0.1 * v);
}

TEST(MlmHead, EmptySelectionAndRangeCheck) {
  Model m(small_config());
  Tensor hidden({4, 8});
  EXPECT_EQ(mlm_logits(hidden, {}, m.w).shape(), (Shape{0, 20}));
  std::vector<std::size_t> bad{4};
  EXPECT_THROW(mlm_logits(hidden, bad, m.w), ContractError);
}

TEST(MlmHead, MatchesDirectComputation) {
  Model m(small_config());
  Rng rng(8);
  auto hidden = pclm::testing::random_tensor(rng, {3, 8});
  std::vector<std::size_t> rows{1};
  auto logits = mlm_logits(hidden, rows, m.w);
  // Reference: explicit loops over the same formula.
  const std::size_t d = 8;
  std::vector<double> x(d), y(d);
  for (std::size_t j = 0; j < d; ++j) {
    double s = m.w.mlm_b[j];
    for (std::size_t i = 0; i < d; ++i) s += hidden.at(1, i) * m.w.mlm_w.at(i, j);
    y[j] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
  }
  double mu = 0.0, var = 0.0;
  for (double v : y) mu += v / d;
  for (double v : y) var += (v - mu) * (v - mu) / d;
  for (std::size_t j = 0; j < d; ++j) {
    x[j] = (y[j] - mu) / std::sqrt(var + kLayerNormEps) * m.w.mlm_gain[j] + m.w.mlm_bias[j];
  }
  for (std::size_t v = 0; v < 20; ++v) {
    double s = m.w.mlm_out_bias[v];
    for (std::size_t j = 0; j < d; ++j) s += x[j] * m.w.word.at(v, j);
    EXPECT_NEAR(logits.at(0, v), s, 1e-12);
  }
}

TEST(ParameterStore, DuplicateAndMissingNames) {
  ParameterStore s;
  s.add("a", Tensor({2}));
  EXPECT_THROW(s.add("a", Tensor({2})), ContractError);
  EXPECT_THROW(s.get("b"), MissingTensorError);
  EXPECT_TRUE(s.get("a").requires_grad());
  EXPECT_EQ(s.scalar_count(), 2u);
}
