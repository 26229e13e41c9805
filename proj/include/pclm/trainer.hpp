#pragma once

// Joint pre-training: each step samples windows of k+1 consecutive groups,
// masks them, encodes every group once, rolls the pathway over each window and
// minimizes InfoNCE + masked-LM with Adam.

#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "pclm/config.hpp"
#include "pclm/corpus.hpp"
#include "pclm/encoder.hpp"
#include "pclm/objective.hpp"
#include "pclm/optim.hpp"
#include "pclm/pcnet.hpp"

namespace pclm {

// Seed streams derived from train.seed.
inline constexpr std::uint64_t kInitStream = 0xC0FFEE;
inline constexpr std::uint64_t kStepStreamBase = 1;

struct TrainingData {
  std::vector<SequenceGroup> groups;
  std::vector<std::size_t> window_starts;  // window = groups[s, s + window_len)
  std::size_t window_len = 0;
  std::size_t short_documents = 0;  // documents too short to form a window
};

inline TrainingData build_training_data(const std::vector<Document>& docs, const RunConfig& cfg) {
  TrainingData data;
  data.window_len = cfg.pc.k + 1;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    auto groups = make_groups(docs[d], d, cfg.encoder.max_len, cfg.corpus.group_size);
    const std::size_t base = data.groups.size();
    if (groups.size() < data.window_len) {
      ++data.short_documents;
    } else {
      for (std::size_t s = 0; s + data.window_len <= groups.size(); ++s) {
        data.window_starts.push_back(base + s);
      }
    }
    data.groups.insert(data.groups.end(), groups.begin(), groups.end());
  }
  if (data.window_starts.empty()) {
    throw ConfigError("corpus too short: no document yields " + std::to_string(data.window_len) +
                      " consecutive sentence groups (pc.k + 1)");
  }
  return data;
}

// Masked groups of B windows, laid out window-major: group b*T + t is step t
// of window b.
struct TrainBatch {
  MaskedBatch masked;
  std::size_t windows = 0;
  std::size_t steps = 0;
};

inline TrainBatch make_batch(const TrainingData& data, const RunConfig& cfg, Rng& rng) {
  std::vector<std::size_t> order(data.window_starts.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t B = std::min(cfg.train.batch_windows, order.size());
  for (std::size_t i = 0; i < B; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
  std::vector<SequenceGroup> groups;
  groups.reserve(B * data.window_len);
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t s = data.window_starts[order[i]];
    for (std::size_t t = 0; t < data.window_len; ++t) groups.push_back(data.groups[s + t]);
  }
  TrainBatch batch;
  batch.masked = dynamic_mask(groups, cfg.train.mask_rate, cfg.encoder.vocab_size, rng);
  batch.windows = B;
  batch.steps = data.window_len;
  return batch;
}

inline void init_model(ParameterStore& store, const RunConfig& cfg) {
  Rng rng(derive_seed(cfg.train.seed, kInitStream));
  init_encoder(store, cfg.encoder, rng);
  init_pathway(store, cfg.encoder.hidden_dim, rng);
}

enum class CountMode { training, inference };

inline std::size_t param_count(const ParameterStore& params, CountMode mode) {
  const std::size_t enc = params.scalar_count(kEncoderPrefix);
  return mode == CountMode::inference ? enc : enc + params.scalar_count(kPathwayPrefix);
}

struct Losses {
  LossValue nsm;
  LossValue mlm;
  Tensor total;
  std::size_t pool_size = 0;
  bool degenerate = false;
};

// Forward pass of one training step. Dropout draws from `dropout_rng`.
inline Losses forward_losses(const TrainBatch& batch, const ParameterStore& params,
                             const RunConfig& cfg, Rng& dropout_rng) {
  const auto enc = bind_encoder(params, cfg.encoder);
  const auto path = bind_pathway(params);
  const std::size_t B = batch.windows, T = batch.steps, len = cfg.encoder.max_len;

  std::vector<std::vector<TokenId>> ids;
  ids.reserve(batch.masked.groups.size());
  for (const auto& g : batch.masked.groups) ids.push_back(g.token_ids);
  EncodeOptions opts;
  opts.mode = Mode::train;
  opts.dropout_rng = &dropout_rng;
  const LayerStates st = encode_batch(ids, enc, cfg.encoder, opts);

  std::vector<std::vector<Tensor>> z(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B; ++b) rows.push_back(b * T + t);
    for (std::size_t l = 0; l < st.num_layers(); ++l) z[t].push_back(embedding_lookup(st.z[l], rows));
  }
  const auto roll = rollout(z, path, cfg.pc_config());
  const auto pools = build_candidate_pools(roll.pairs, z);

  std::vector<std::size_t> rows;
  std::vector<TokenId> targets;
  for (std::size_t g = 0; g < batch.masked.groups.size(); ++g) {
    for (std::size_t i = 0; i < batch.masked.masked_positions[g].size(); ++i) {
      rows.push_back(g * len + batch.masked.masked_positions[g][i]);
      targets.push_back(batch.masked.mlm_targets[g][i]);
    }
  }

  Losses out;
  out.nsm = info_nce(pools);
  out.mlm = mlm_loss(mlm_logits(st.final_hidden, rows, enc), targets);
  out.pool_size = pools.blocks.front().pool_size();
  out.degenerate = pools.degenerate;
  out.total = total_loss(out.nsm.loss, out.mlm.loss, cfg.train.nsm_weight, cfg.train.mlm_weight);
  return out;
}

struct StepMetrics {
  std::uint64_t step = 0;
  double nsm = 0.0;
  double mlm = 0.0;
  double total = 0.0;
  double nsm_per_term = 0.0;
  double grad_norm = 0.0;
  std::size_t pool = 0;
};

inline std::string format_metrics(const StepMetrics& m) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "step=%llu nsm=%.17g mlm=%.17g total=%.17g nsm_per_term=%.17g grad_norm=%.17g pool=%zu",
                static_cast<unsigned long long>(m.step), m.nsm, m.mlm, m.total, m.nsm_per_term,
                m.grad_norm, m.pool);
  return buf;
}

// Forward, backward and one Adam update. Metrics describe the parameters
// before the update.
inline StepMetrics train_step(const TrainBatch& batch, ParameterStore& params, AdamState& optim,
                              const RunConfig& cfg, Rng& dropout_rng) {
  for (const auto& [name, t] : params.tensors())
    if (!all_finite(t.data())) throw NumericError("train_step: parameter '" + name + "' is not finite");
  params.zero_grad();
  Graph graph;
  Losses losses;
  {
    GraphScope scope(graph);
    try {
      losses = forward_losses(batch, params, cfg, dropout_rng);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(optim.step + 1) + ": " + e.what());
    }
  }
  backward(losses.total, graph);
  StepMetrics m;
  m.step = optim.step + 1;
  m.nsm = losses.nsm.loss.item();
  m.mlm = losses.mlm.loss.item();
  m.total = losses.total.item();
  m.nsm_per_term = losses.nsm.per_term();
  m.grad_norm = grad_norm(params);
  m.pool = losses.pool_size;
  if (!std::isfinite(m.grad_norm)) {
    throw NumericError("step " + std::to_string(m.step) + ": gradient norm is not finite");
  }
  adam_step(params, optim, cfg.train.adam());
  return m;
}

// Runs steps optim.step+1 .. train.steps. Every step's randomness comes from
// derive_seed(seed, step), so resuming from a checkpoint replays exactly.
inline void train_loop(const TrainingData& data, const RunConfig& cfg, ParameterStore& params,
                       AdamState& optim, const std::function<void(const StepMetrics&)>& on_step,
                       const std::function<void(std::uint64_t)>& on_checkpoint = {}) {
  while (optim.step < cfg.train.steps) {
    const std::uint64_t step = optim.step + 1;
    Rng rng(derive_seed(cfg.train.seed, kStepStreamBase + step));
    const TrainBatch batch = make_batch(data, cfg, rng);
    const StepMetrics m = train_step(batch, params, optim, cfg, rng);
    if (on_step) on_step(m);
    if (on_checkpoint && cfg.train.checkpoint_every && step % cfg.train.checkpoint_every == 0) {
      on_checkpoint(step);
    }
  }
}

}  // namespace pclm
