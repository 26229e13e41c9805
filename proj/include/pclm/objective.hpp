#pragma once

// Training losses: contrastive next-sentence prediction (InfoNCE over in-batch
// candidates), masked-LM cross-entropy, and their sum.

#include <cmath>
#include <string>
#include <vector>

#include "pclm/corpus.hpp"
#include "pclm/ops.hpp"
#include "pclm/pcnet.hpp"

namespace pclm {

// All prediction terms of one layer against that layer's candidate pool.
// Row p of `predictions` scores against every pool row; its positive is
// pool row positives[p].
struct ContrastiveBlock {
  std::size_t layer = 0;
  Tensor predictions;  // [P,d]
  Tensor pool;         // [M,d]
  std::vector<std::size_t> positives;

  std::size_t num_terms() const { return positives.size(); }
  std::size_t pool_size() const { return pool.dim(0); }
};

struct ContrastiveBatch {
  std::vector<ContrastiveBlock> blocks;
  bool degenerate = false;  // every pool holds only its positive

  std::size_t num_terms() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.num_terms();
    return n;
  }
};

struct LossValue {
  Tensor loss;  // scalar
  std::size_t terms = 0;
  bool empty = false;

  double per_term() const { return terms ? loss.item() / static_cast<double>(terms) : 0.0; }
};

// Summed -log softmax(pred . pool^T)[positive] over every term; dot products
// are unscaled.
inline LossValue info_nce(const ContrastiveBatch& batch) {
  std::vector<Tensor> parts;
  std::size_t terms = 0;
  for (const auto& blk : batch.blocks) {
    const std::size_t P = blk.predictions.dim(0), M = blk.pool_size();
    if (blk.positives.size() != P) {
      throw ContractError("info_nce: " + std::to_string(P) + " predictions but " +
                          std::to_string(blk.positives.size()) + " positives");
    }
    if (M == 0) throw ContractError("info_nce: empty candidate pool");
    std::vector<std::size_t> picks;
    picks.reserve(P);
    for (std::size_t p = 0; p < P; ++p) {
      if (blk.positives[p] >= M) {
        throw ContractError("info_nce: positive " + std::to_string(blk.positives[p]) +
                            " missing from a pool of " + std::to_string(M) + " at layer " +
                            std::to_string(blk.layer));
      }
      picks.push_back(p * M + blk.positives[p]);
    }
    if (P == 0) continue;
    Tensor scores = log_softmax(matmul(blk.predictions, transpose(blk.pool)), 1);
    parts.push_back(sum_all(embedding_lookup(reshape(scores, {P * M, 1}), picks)));
    terms += P;
  }
  if (parts.empty()) return {Tensor::scalar(0.0), 0, true};
  Tensor total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  return {scale(total, -1.0), terms, false};
}

// One block per participating layer. The pool for layer l stacks z_t^l for
// every step t and window b, row (t-1)*B + b; a pair predicting step t for
// window b has its positive at that same row.
inline ContrastiveBatch build_candidate_pools(const std::vector<PredictionPair>& pairs,
                                              const std::vector<std::vector<Tensor>>& z_seq) {
  if (pairs.empty()) throw ContractError("build_candidate_pools: no prediction pairs");
  const std::size_t T = z_seq.size();
  ContrastiveBatch out;
  std::vector<std::size_t> layers;
  for (const auto& p : pairs)
    if (std::find(layers.begin(), layers.end(), p.layer) == layers.end()) layers.push_back(p.layer);
  std::sort(layers.begin(), layers.end());

  for (std::size_t l : layers) {
    ContrastiveBlock blk;
    blk.layer = l;
    std::vector<Tensor> pool_parts, preds;
    for (std::size_t t = 0; t < T; ++t) pool_parts.push_back(z_seq[t].at(l - 1));
    const std::size_t B = pool_parts.front().dim(0);
    blk.pool = T == 1 ? pool_parts.front() : concat(pool_parts, 0);
    for (const auto& p : pairs) {
      if (p.layer != l) continue;
      if (p.time < 1 || p.time > T) {
        throw ContractError("build_candidate_pools: pair time " + std::to_string(p.time) +
                            " outside 1.." + std::to_string(T));
      }
      preds.push_back(p.predicted);
      for (std::size_t b = 0; b < B; ++b) blk.positives.push_back((p.time - 1) * B + b);
    }
    blk.predictions = preds.size() == 1 ? preds.front() : concat(preds, 0);
    out.blocks.push_back(std::move(blk));
  }
  out.degenerate = true;
  for (const auto& b : out.blocks) out.degenerate = out.degenerate && b.pool_size() == 1;
  return out;
}

// Mean cross-entropy of logits [N,V] against targets; N = 0 gives 0 with the
// empty flag set.
inline LossValue mlm_loss(const Tensor& logits, const std::vector<TokenId>& targets) {
  const std::size_t N = targets.size();
  if (logits.rank() != 2 || logits.dim(0) != N) {
    throw ContractError("mlm_loss: " + std::to_string(N) + " targets for logits " +
                        shape_str(logits.shape()));
  }
  if (N == 0) return {Tensor::scalar(0.0), 0, true};
  const std::size_t V = logits.dim(1);
  std::vector<std::size_t> picks;
  picks.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    if (targets[i] >= V) throw ContractError("mlm_loss: target id beyond vocab");
    picks.push_back(i * V + targets[i]);
  }
  Tensor lp = log_softmax(logits, 1);
  Tensor picked = embedding_lookup(reshape(lp, {N * V, 1}), picks);
  return {scale(sum_all(picked), -1.0 / static_cast<double>(N)), N, false};
}

inline Tensor total_loss(const Tensor& nsm, const Tensor& mlm, double nsm_weight = 1.0,
                         double mlm_weight = 1.0) {
  if (!std::isfinite(nsm.item())) throw NumericError("total_loss: nsm loss is not finite");
  if (!std::isfinite(mlm.item())) throw NumericError("total_loss: mlm loss is not finite");
  if (nsm_weight == 1.0 && mlm_weight == 1.0) return add(nsm, mlm);
  return add(scale(nsm, nsm_weight), scale(mlm, mlm_weight));
}

}  // namespace pclm
