#pragma once

// Post-layer-norm transformer encoder with learned absolute positions and a
// weight-tied masked-LM head. Per-layer [CLS] vectors are the sentence-group
// representations the predictive pathway consumes.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pclm/corpus.hpp"
#include "pclm/ops.hpp"
#include "pclm/params.hpp"
#include "pclm/rng.hpp"

namespace pclm {

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 64;
  std::size_t max_len = 48;
  std::size_t vocab_size = 0;
  double dropout = 0.1;

  void validate() const {
    if (num_layers < 1) throw ConfigError("encoder: num_layers must be >= 1");
    if (hidden_dim < 1 || num_heads < 1 || hidden_dim % num_heads != 0) {
      throw ConfigError("encoder: hidden_dim must be a positive multiple of num_heads");
    }
    if (ffn_dim < 1) throw ConfigError("encoder: ffn_dim must be >= 1");
    if (max_len < 4) throw ConfigError("encoder: max_len must be >= 4");
    if (vocab_size <= kNumSpecial) throw ConfigError("encoder: vocab_size must exceed 5");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder: dropout must lie in [0, 1)");
  }
};

enum class Mode { train, eval };

struct TransformerLayerWeights {
  Tensor query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  Tensor attn_gain, attn_bias;
  Tensor ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  Tensor ffn_gain, ffn_bias;
};

struct EncoderWeights {
  Tensor word, position, emb_gain, emb_bias;
  std::vector<TransformerLayerWeights> layers;
  Tensor mlm_w, mlm_b, mlm_gain, mlm_bias, mlm_out_bias;
};

namespace detail {
inline std::string layer_prefix(std::size_t l) {
  return "encoder.layer." + std::to_string(l) + ".";
}
}  // namespace detail

// BERT-style init: N(0, 0.02) matrices, zero biases, unit gains.
inline void init_encoder(ParameterStore& store, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.hidden_dim, f = cfg.ffn_dim, V = cfg.vocab_size;
  constexpr double sd = 0.02;
  auto matrix = [&](const std::string& name, std::size_t r, std::size_t c) {
    store.add(name, normal_init(rng, {r, c}, sd));
  };
  auto zeros = [&](const std::string& name, std::size_t n) { store.add(name, Tensor({n}, 0.0)); };
  auto ones = [&](const std::string& name, std::size_t n) { store.add(name, Tensor({n}, 1.0)); };

  matrix("encoder.embeddings.word", V, d);
  matrix("encoder.embeddings.position", cfg.max_len, d);
  ones("encoder.embeddings.norm.gain", d);
  zeros("encoder.embeddings.norm.bias", d);
  for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
    const auto p = detail::layer_prefix(l);
    for (const char* proj : {"query", "key", "value", "output"}) {
      matrix(p + "attention." + proj + ".weight", d, d);
      zeros(p + "attention." + proj + ".bias", d);
    }
    ones(p + "attention.norm.gain", d);
    zeros(p + "attention.norm.bias", d);
    matrix(p + "ffn.in.weight", d, f);
    zeros(p + "ffn.in.bias", f);
    matrix(p + "ffn.out.weight", f, d);
    zeros(p + "ffn.out.bias", d);
    ones(p + "ffn.norm.gain", d);
    zeros(p + "ffn.norm.bias", d);
  }
  matrix("encoder.mlm.transform.weight", d, d);
  zeros("encoder.mlm.transform.bias", d);
  ones("encoder.mlm.norm.gain", d);
  zeros("encoder.mlm.norm.bias", d);
  zeros("encoder.mlm.output_bias", V);
}

inline EncoderWeights bind_encoder(const ParameterStore& store, const EncoderConfig& cfg) {
  EncoderWeights w;
  w.word = store.get("encoder.embeddings.word");
  w.position = store.get("encoder.embeddings.position");
  w.emb_gain = store.get("encoder.embeddings.norm.gain");
  w.emb_bias = store.get("encoder.embeddings.norm.bias");
  for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
    const auto p = detail::layer_prefix(l);
    TransformerLayerWeights lw;
    lw.query_w = store.get(p + "attention.query.weight");
    lw.query_b = store.get(p + "attention.query.bias");
    lw.key_w = store.get(p + "attention.key.weight");
    lw.key_b = store.get(p + "attention.key.bias");
    lw.value_w = store.get(p + "attention.value.weight");
    lw.value_b = store.get(p + "attention.value.bias");
    lw.out_w = store.get(p + "attention.output.weight");
    lw.out_b = store.get(p + "attention.output.bias");
    lw.attn_gain = store.get(p + "attention.norm.gain");
    lw.attn_bias = store.get(p + "attention.norm.bias");
    lw.ffn_in_w = store.get(p + "ffn.in.weight");
    lw.ffn_in_b = store.get(p + "ffn.in.bias");
    lw.ffn_out_w = store.get(p + "ffn.out.weight");
    lw.ffn_out_b = store.get(p + "ffn.out.bias");
    lw.ffn_gain = store.get(p + "ffn.norm.gain");
    lw.ffn_bias = store.get(p + "ffn.norm.bias");
    w.layers.push_back(std::move(lw));
  }
  w.mlm_w = store.get("encoder.mlm.transform.weight");
  w.mlm_b = store.get("encoder.mlm.transform.bias");
  w.mlm_gain = store.get("encoder.mlm.norm.gain");
  w.mlm_bias = store.get("encoder.mlm.norm.bias");
  w.mlm_out_bias = store.get("encoder.mlm.output_bias");
  if (w.word.shape() != Shape{cfg.vocab_size, cfg.hidden_dim} ||
      w.position.shape() != Shape{cfg.max_len, cfg.hidden_dim} ||
      w.layers.front().ffn_in_w.shape() != Shape{cfg.hidden_dim, cfg.ffn_dim}) {
    throw ConfigError("encoder: stored tensor shapes do not match the configuration");
  }
  return w;
}

// Per-group outputs of one encoder pass over B groups.
struct LayerStates {
  // z[l-1] is [B,d]: row b is group b's [CLS] vector after layer l.
  std::vector<Tensor> z;
  // [B*max_len, d] output of the last layer.
  Tensor final_hidden;
  // Filled only on request: index 0 is the embedding output, index l the
  // full [B*max_len, d] output of layer l.
  std::vector<Tensor> layer_outputs;

  std::size_t num_layers() const { return z.size(); }
  std::size_t batch() const { return z.empty() ? 0 : z.front().dim(0); }

  // [L,d] matrix of group b's per-layer [CLS] vectors, outside any graph.
  Tensor cls_matrix(std::size_t b) const {
    const std::size_t d = z.front().dim(1);
    Tensor out({z.size(), d});
    for (std::size_t l = 0; l < z.size(); ++l)
      for (std::size_t j = 0; j < d; ++j) out.mutable_data()[l * d + j] = z[l].at(b, j);
    return out;
  }
};

inline constexpr double kMaskedScore = -1e9;

// Additive key mask [B,T]: 0 for real tokens, a large negative for [PAD].
inline Tensor attention_mask(const std::vector<std::vector<TokenId>>& batch) {
  const std::size_t B = batch.size(), T = B ? batch.front().size() : 0;
  Tensor mask({B, T});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      if (batch[b][t] == kPad) mask.mutable_data()[b * T + t] = kMaskedScore;
  return mask;
}

struct EncodeOptions {
  Mode mode = Mode::eval;
  Rng* dropout_rng = nullptr;          // required when mode == train and dropout > 0
  std::optional<Tensor> key_mask;      // defaults to attention_mask(batch)
  bool keep_layer_outputs = false;
};

namespace detail {

inline Tensor affine_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  return add(multiply(layer_norm(x, 1), gain), bias);
}

inline Tensor dropout(const Tensor& x, double rate, Mode mode, Rng* rng) {
  if (mode == Mode::eval || rate <= 0.0) return x;
  if (!rng) throw ContractError("encode: train mode with dropout needs an rng");
  Tensor keep(x.shape());
  const double scale_kept = 1.0 / (1.0 - rate);
  for (double& v : keep.mutable_data()) v = rng->bernoulli(rate) ? 0.0 : scale_kept;
  return multiply(x, keep);
}

}  // namespace detail

inline LayerStates encode_batch(const std::vector<std::vector<TokenId>>& batch,
                                const EncoderWeights& w, const EncoderConfig& cfg,
                                const EncodeOptions& opts = {}) {
  const std::size_t B = batch.size(), T = cfg.max_len, d = cfg.hidden_dim;
  const std::size_t H = cfg.num_heads, dh = d / H;
  if (B == 0) throw ContractError("encode: empty batch");
  std::vector<std::size_t> token_rows, position_rows, cls_rows;
  token_rows.reserve(B * T);
  position_rows.reserve(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    if (batch[b].size() != T) {
      throw ContractError("encode: sequence length " + std::to_string(batch[b].size()) +
                          " != max_len " + std::to_string(T));
    }
    cls_rows.push_back(b * T);
    for (std::size_t t = 0; t < T; ++t) {
      if (batch[b][t] >= cfg.vocab_size) {
        throw ContractError("encode: token id " + std::to_string(batch[b][t]) +
                            " out of range for vocab_size " + std::to_string(cfg.vocab_size));
      }
      token_rows.push_back(batch[b][t]);
      position_rows.push_back(t);
    }
  }
  const Tensor key_mask = opts.key_mask ? *opts.key_mask : attention_mask(batch);

  LayerStates out;
  Tensor h = add(embedding_lookup(w.word, token_rows), embedding_lookup(w.position, position_rows));
  h = detail::affine_norm(h, w.emb_gain, w.emb_bias);
  h = detail::dropout(h, cfg.dropout, opts.mode, opts.dropout_rng);
  if (opts.keep_layer_outputs) out.layer_outputs.push_back(h);

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& lw : w.layers) {
    Tensor q = linear(h, lw.query_w, lw.query_b);
    Tensor k = linear(h, lw.key_w, lw.key_b);
    Tensor v = linear(h, lw.value_w, lw.value_b);
    std::vector<Tensor> heads;
    for (std::size_t hd = 0; hd < H; ++hd) {
      auto split = [&](const Tensor& x) { return reshape(slice(x, 1, hd * dh, dh), {B, T, dh}); };
      Tensor scores = scale(matmul(split(q), transpose(split(k))), inv_sqrt_dh);
      Tensor probs = softmax(mask_add(scores, key_mask), 2);
      heads.push_back(matmul(probs, split(v)));
    }
    Tensor ctx = H == 1 ? heads.front() : concat(heads, 2);
    Tensor attn = linear(reshape(ctx, {B * T, d}), lw.out_w, lw.out_b);
    attn = detail::dropout(attn, cfg.dropout, opts.mode, opts.dropout_rng);
    h = detail::affine_norm(add(h, attn), lw.attn_gain, lw.attn_bias);

    Tensor ff = linear(gelu(linear(h, lw.ffn_in_w, lw.ffn_in_b)), lw.ffn_out_w, lw.ffn_out_b);
    ff = detail::dropout(ff, cfg.dropout, opts.mode, opts.dropout_rng);
    h = detail::affine_norm(add(h, ff), lw.ffn_gain, lw.ffn_bias);

    out.z.push_back(embedding_lookup(h, cls_rows));
    if (opts.keep_layer_outputs) out.layer_outputs.push_back(h);
  }
  out.final_hidden = h;
  return out;
}

inline LayerStates encode(const SequenceGroup& group, const EncoderWeights& w,
                          const EncoderConfig& cfg, const EncodeOptions& opts = {}) {
  return encode_batch({group.token_ids}, w, cfg, opts);
}

// MLM head over selected rows of final_hidden (flat row indices b*max_len+t):
// affine -> gelu -> layer-norm -> projection onto the tied word embeddings.
inline Tensor mlm_logits(const Tensor& final_hidden, std::span<const std::size_t> rows,
                         const EncoderWeights& w) {
  for (std::size_t r : rows) {
    if (r >= final_hidden.dim(0)) {
      throw ContractError("mlm_logits: row " + std::to_string(r) + " beyond " +
                          std::to_string(final_hidden.dim(0)) + " hidden rows");
    }
  }
  if (rows.empty()) return Tensor({0, w.word.dim(0)});
  Tensor x = embedding_lookup(final_hidden, rows);
  x = gelu(linear(x, w.mlm_w, w.mlm_b));
  x = detail::affine_norm(x, w.mlm_gain, w.mlm_bias);
  return add(matmul(x, transpose(w.word)), w.mlm_out_bias);
}

}  // namespace pclm
