#pragma once

// Frozen-embedding evaluation: sentence embeddings from the encoder alone,
// synthetic sentence-pair probe tasks, a logistic-regression probe, and
// cosine nearest-neighbour retrieval.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "pclm/corpus.hpp"
#include "pclm/encoder.hpp"

namespace pclm {

using Embedding = std::vector<double>;

// A sentence as a one-sentence group, encoded in eval mode; the embedding is
// the mean over layers 1..L of the [CLS] vector.
inline std::vector<Embedding> embed_sentences(const std::vector<std::vector<TokenId>>& sentences,
                                              const EncoderWeights& w, const EncoderConfig& cfg,
                                              std::size_t batch_size = 64) {
  NoGradScope no_grad;
  std::vector<Embedding> out;
  out.reserve(sentences.size());
  const std::size_t d = cfg.hidden_dim, L = cfg.num_layers;
  for (std::size_t start = 0; start < sentences.size(); start += batch_size) {
    const std::size_t end = std::min(sentences.size(), start + batch_size);
    std::vector<std::vector<TokenId>> ids;
    for (std::size_t i = start; i < end; ++i) ids.push_back(tokenize_truncate_pad({sentences[i]}, cfg.max_len));
    const LayerStates st = encode_batch(ids, w, cfg);
    for (std::size_t b = 0; b < ids.size(); ++b) {
      Embedding e(d, 0.0);
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < d; ++j) e[j] += st.z[l].at(b, j);
      for (double& v : e) v /= static_cast<double>(L);
      out.push_back(std::move(e));
    }
  }
  return out;
}

inline Embedding embed_sentence(const std::vector<TokenId>& sentence, const EncoderWeights& w,
                                const EncoderConfig& cfg) {
  return embed_sentences({sentence}, w, cfg).front();
}

// Flat view of a corpus's sentences with document membership.
struct SentenceTable {
  std::vector<std::vector<TokenId>> sentences;
  std::vector<std::size_t> doc_of;
  std::vector<std::size_t> doc_begin;  // index of each document's first sentence

  static SentenceTable from(const std::vector<Document>& docs) {
    SentenceTable t;
    for (std::size_t d = 0; d < docs.size(); ++d) {
      t.doc_begin.push_back(t.sentences.size());
      for (const auto& s : docs[d].sentences) {
        t.sentences.push_back(s);
        t.doc_of.push_back(d);
      }
    }
    return t;
  }
};

// Pair example over SentenceTable indices.
struct PairExample {
  std::size_t first;
  std::size_t second;
  int label;
};

struct ProbeTask {
  std::string name;
  std::vector<PairExample> train, test;
  std::vector<bool> train_docs;  // true: document belongs to the training split
};

inline constexpr std::size_t kMinAdjacentPairs = 100;

// "order": an adjacent pair, shown in order (1) or swapped (0).
// "next_vs_random": a sentence with its true successor (1) or with a sentence
// drawn uniformly from the same split (0).
// Documents are split 80/20; labels are exactly balanced within each split
// (up to one example when the count is odd). `examples` caps the total per
// task; 0 keeps every adjacent pair.
inline std::vector<ProbeTask> make_synthetic_tasks(const std::vector<Document>& docs, Rng& rng,
                                                   std::size_t examples = 0) {
  const SentenceTable table = SentenceTable::from(docs);
  std::vector<std::size_t> pairs;  // index of the first sentence of an adjacent pair
  for (std::size_t d = 0; d < docs.size(); ++d)
    for (std::size_t i = 0; i + 1 < docs[d].sentences.size(); ++i) pairs.push_back(table.doc_begin[d] + i);
  if (pairs.size() < kMinAdjacentPairs) {
    throw ConfigError("probe: corpus has " + std::to_string(pairs.size()) +
                      " adjacent sentence pairs, need at least " + std::to_string(kMinAdjacentPairs));
  }
  if (docs.size() < 2) throw ConfigError("probe: need at least two documents to split");

  std::vector<std::size_t> doc_order(docs.size());
  std::iota(doc_order.begin(), doc_order.end(), 0);
  rng.shuffle(doc_order.begin(), doc_order.end());
  const std::size_t n_train_docs =
      std::clamp<std::size_t>((docs.size() * 8 + 5) / 10, 1, docs.size() - 1);
  std::vector<bool> in_train(docs.size(), false);
  for (std::size_t i = 0; i < n_train_docs; ++i) in_train[doc_order[i]] = true;

  std::vector<std::size_t> split_sentences[2];  // [0] test, [1] train
  for (std::size_t s = 0; s < table.sentences.size(); ++s) split_sentences[in_train[table.doc_of[s]]].push_back(s);

  auto build = [&](const std::string& name, bool next_vs_random) {
    std::vector<std::size_t> chosen = pairs;
    rng.shuffle(chosen.begin(), chosen.end());
    if (examples > 0 && examples < chosen.size()) chosen.resize(examples);
    std::vector<std::size_t> by_split[2];
    for (std::size_t p : chosen) by_split[in_train[table.doc_of[p]]].push_back(p);
    ProbeTask task;
    task.name = name;
    task.train_docs = in_train;
    for (int split = 0; split < 2; ++split) {
      auto& out = split ? task.train : task.test;
      const auto& list = by_split[split];
      const auto& pool = split_sentences[split];
      if (next_vs_random && !list.empty() && pool.size() < 3) {
        throw ConfigError("probe: split too small to draw distractors");
      }
      for (std::size_t i = 0; i < list.size(); ++i) {
        const std::size_t a = list[i], b = a + 1;
        const int label = i < (list.size() + 1) / 2 ? 1 : 0;
        if (!next_vs_random) {
          out.push_back(label ? PairExample{a, b, 1} : PairExample{b, a, 0});
        } else if (label) {
          out.push_back({a, b, 1});
        } else {
          std::size_t x = b;
          while (x == b || x == a) x = pool[rng.below(pool.size())];
          out.push_back({a, x, 0});
        }
      }
      rng.shuffle(out.begin(), out.end());
    }
    return task;
  };
  return {build("order", false), build("next_vs_random", true)};
}

// [u, v, u*v, |u - v|]
inline Eigen::MatrixXd pair_features(const std::vector<PairExample>& examples,
                                     const std::vector<Embedding>& emb) {
  const std::size_t d = emb.empty() ? 0 : emb.front().size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(examples.size()), static_cast<Eigen::Index>(4 * d));
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& u = emb.at(examples[i].first);
    const auto& v = emb.at(examples[i].second);
    for (std::size_t j = 0; j < d; ++j) {
      const auto r = static_cast<Eigen::Index>(i);
      X(r, static_cast<Eigen::Index>(j)) = u[j];
      X(r, static_cast<Eigen::Index>(d + j)) = v[j];
      X(r, static_cast<Eigen::Index>(2 * d + j)) = u[j] * v[j];
      X(r, static_cast<Eigen::Index>(3 * d + j)) = std::abs(u[j] - v[j]);
    }
  }
  return X;
}

inline std::vector<int> labels_of(const std::vector<PairExample>& examples) {
  std::vector<int> y;
  for (const auto& e : examples) y.push_back(e.label);
  return y;
}

struct ProbeOptions {
  double l2 = 1e-4;
  std::size_t max_iter = 10000;
  double tolerance = 1e-6;
};

struct LogisticProbe {
  Eigen::RowVectorXd mean, scale;  // standardization from the training split
  Eigen::MatrixXd weights;         // [F, C]
  Eigen::RowVectorXd bias;         // [C]
  bool converged = false;
  std::size_t iterations = 0;
  double final_grad_norm = 0.0;
};

namespace detail {

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    p.row(r).array() -= p.row(r).maxCoeff();
    p.row(r) = p.row(r).array().exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace detail

// Multinomial logistic regression on standardized features, minimizing mean
// cross-entropy + (l2/2)|W|^2 by accelerated full-batch gradient descent.
inline LogisticProbe train_probe(const Eigen::MatrixXd& X_raw, const std::vector<int>& y,
                                 const ProbeOptions& opt = {}) {
  const Eigen::Index n = X_raw.rows(), F = X_raw.cols();
  if (n == 0 || static_cast<std::size_t>(n) != y.size()) {
    throw ContractError("train_probe: need one label per training row");
  }
  const int C = std::max(2, *std::max_element(y.begin(), y.end()) + 1);
  LogisticProbe probe;
  probe.mean = X_raw.colwise().mean();
  probe.scale = ((X_raw.rowwise() - probe.mean).array().square().colwise().sum() / static_cast<double>(n))
                    .sqrt()
                    .matrix();
  for (Eigen::Index j = 0; j < F; ++j)
    if (!(probe.scale(j) > 1e-12)) probe.scale(j) = 1.0;
  const Eigen::MatrixXd X = (X_raw.rowwise() - probe.mean).array().rowwise() / probe.scale.array();
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, C);
  for (Eigen::Index i = 0; i < n; ++i) Y(i, y[static_cast<std::size_t>(i)]) = 1.0;

  // Step 1/Lip with Lip bounding the Hessian: 0.5 * lambda_max(X'X/n) + l2,
  // counting the bias as a column of ones.
  Eigen::MatrixXd Xb(n, F + 1);
  Xb << X, Eigen::VectorXd::Ones(n);
  const Eigen::MatrixXd gram = Xb.transpose() * Xb / static_cast<double>(n);
  const double lam = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly)
                         .eigenvalues()
                         .maxCoeff();
  const double step = 1.0 / (0.5 * lam + opt.l2);

  Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(F + 1, C), look = theta;
  auto gradient = [&](const Eigen::MatrixXd& th) {
    Eigen::MatrixXd g = Xb.transpose() * (detail::softmax_rows(Xb * th) - Y) / static_cast<double>(n);
    g.topRows(F) += opt.l2 * th.topRows(F);
    return g;
  };
  double t_prev = 1.0;
  for (std::size_t it = 1; it <= opt.max_iter; ++it) {
    const Eigen::MatrixXd g = gradient(look);
    probe.iterations = it;
    probe.final_grad_norm = g.norm();
    if (probe.final_grad_norm < opt.tolerance) {
      theta = look;
      probe.converged = true;
      break;
    }
    const Eigen::MatrixXd next = look - step * g;
    // restart the momentum whenever it points uphill
    if (((next - theta).array() * g.array()).sum() > 0.0) {
      t_prev = 1.0;
      theta = look = next;
      continue;
    }
    const double t = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t_prev * t_prev));
    look = next + ((t_prev - 1.0) / t) * (next - theta);
    theta = next;
    t_prev = t;
  }
  if (!probe.converged) {
    probe.final_grad_norm = gradient(theta).norm();
    probe.converged = probe.final_grad_norm < opt.tolerance;
  }
  probe.weights = theta.topRows(F);
  probe.bias = theta.row(F);
  return probe;
}

inline std::vector<int> predict(const LogisticProbe& probe, const Eigen::MatrixXd& X_raw) {
  const Eigen::MatrixXd X = (X_raw.rowwise() - probe.mean).array().rowwise() / probe.scale.array();
  const Eigen::MatrixXd logits = (X * probe.weights).rowwise() + probe.bias;
  std::vector<int> out;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c)
      if (logits(r, c) > logits(r, best)) best = c;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

inline double eval_probe(const LogisticProbe& probe, const Eigen::MatrixXd& X, const std::vector<int>& y) {
  if (y.empty()) return 0.0;
  const auto pred = predict(probe, X);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += pred[i] == y[i];
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

struct ProbeResult {
  double accuracy = 0.0;
  bool converged = false;
};

inline ProbeResult run_probe(const ProbeTask& task, const std::vector<Embedding>& emb,
                             const ProbeOptions& opt = {}) {
  const auto probe = train_probe(pair_features(task.train, emb), labels_of(task.train), opt);
  return {eval_probe(probe, pair_features(task.test, emb), labels_of(task.test)), probe.converged};
}

struct Neighbor {
  std::size_t index;
  double score;
};

struct RetrievalResult {
  std::vector<Neighbor> neighbors;
  std::vector<std::size_t> excluded;  // zero-norm corpus embeddings
  bool query_zero = false;
};

// Top-k corpus entries by cosine similarity, descending; ties keep corpus
// order and k is capped at the number of usable entries.
inline RetrievalResult knn_retrieve(const Embedding& query, const std::vector<Embedding>& corpus,
                                    std::size_t k = 3) {
  if (corpus.empty()) throw ContractError("knn_retrieve: empty corpus");
  if (k < 1) throw ContractError("knn_retrieve: k must be >= 1");
  auto norm = [](const Embedding& e) {
    double s = 0.0;
    for (double v : e) s += v * v;
    return std::sqrt(s);
  };
  RetrievalResult out;
  const double qn = norm(query);
  if (qn == 0.0) {
    out.query_zero = true;
    return out;
  }
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].size() != query.size()) throw ContractError("knn_retrieve: dimension mismatch");
    const double cn = norm(corpus[i]);
    if (cn == 0.0) {
      out.excluded.push_back(i);
      continue;
    }
    double dot = 0.0;
    for (std::size_t j = 0; j < query.size(); ++j) dot += query[j] * corpus[i][j];
    out.neighbors.push_back({i, std::clamp(dot / (qn * cn), -1.0, 1.0)});
  }
  std::stable_sort(out.neighbors.begin(), out.neighbors.end(),
                   [](const Neighbor& a, const Neighbor& b) { return a.score > b.score; });
  if (out.neighbors.size() > k) out.neighbors.resize(k);
  return out;
}

}  // namespace pclm
