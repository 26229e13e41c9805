#pragma once

// Predictive-coding pathway: a single GRU shared by all participating layers
// computes each layer's context from that layer's [CLS] vector, the context
// just computed one layer up (top-down), and its own previous context
// (temporal). A shared linear map predicts the next group's [CLS] vector.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pclm/ops.hpp"
#include "pclm/params.hpp"

namespace pclm {

enum class PcMode { full, half, last, no_tdc };

inline const char* to_string(PcMode m) {
  switch (m) {
    case PcMode::full: return "default";
    case PcMode::half: return "half";
    case PcMode::last: return "last";
    case PcMode::no_tdc: return "no_tdc";
  }
  return "?";
}

inline PcMode parse_pc_mode(const std::string& s) {
  if (s == "default") return PcMode::full;
  if (s == "half") return PcMode::half;
  if (s == "last") return PcMode::last;
  if (s == "no_tdc") return PcMode::no_tdc;
  throw ConfigError("unknown pc mode '" + s + "' (expected default|half|last|no_tdc)");
}

struct PcConfig {
  std::vector<std::size_t> layers;  // ascending, 1-based
  bool top_down = true;
  std::size_t k = 2;

  // half covers ceil(L/2)..L inclusive.
  static PcConfig for_mode(PcMode mode, std::size_t num_layers, std::size_t k) {
    PcConfig c;
    c.k = k;
    std::size_t first = 1;
    if (mode == PcMode::half) first = (num_layers + 1) / 2;
    if (mode == PcMode::last) first = num_layers;
    for (std::size_t l = first; l <= num_layers; ++l) c.layers.push_back(l);
    c.top_down = mode != PcMode::no_tdc;
    return c;
  }

  bool contains(std::size_t layer) const {
    return std::binary_search(layers.begin(), layers.end(), layer);
  }

  void validate(std::size_t num_layers) const {
    if (layers.empty()) throw ConfigError("pc: no layers selected");
    if (!std::is_sorted(layers.begin(), layers.end()) ||
        std::adjacent_find(layers.begin(), layers.end()) != layers.end()) {
      throw ConfigError("pc: layers must be strictly ascending");
    }
    if (layers.front() < 1 || layers.back() > num_layers) {
      throw ConfigError("pc: layers must lie in 1.." + std::to_string(num_layers));
    }
  }
};

struct GruGate {
  Tensor input_w;   // [2d, d]
  Tensor hidden_w;  // [d, d]
  Tensor input_b;   // [d]
  Tensor hidden_b;  // [d]
};

struct PathwayWeights {
  GruGate reset, update, candidate;
  Tensor predictor_w, predictor_b;

  std::size_t dim() const { return predictor_w.dim(0); }
};

// GRU weights uniform(+-1/sqrt(d)); predictor N(0, 0.02) so that initial
// predictions sit near zero and InfoNCE starts at chance.
inline void init_pathway(ParameterStore& store, std::size_t d, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (const char* gate : {"reset", "update", "candidate"}) {
    const std::string p = std::string("pathway.gru.") + gate + ".";
    store.add(p + "input_weight", uniform_init(rng, {2 * d, d}, bound));
    store.add(p + "hidden_weight", uniform_init(rng, {d, d}, bound));
    store.add(p + "input_bias", uniform_init(rng, {d}, bound));
    store.add(p + "hidden_bias", uniform_init(rng, {d}, bound));
  }
  store.add("pathway.predictor.weight", normal_init(rng, {d, d}, 0.02));
  store.add("pathway.predictor.bias", Tensor({d}, 0.0));
}

inline PathwayWeights bind_pathway(const ParameterStore& store) {
  auto gate = [&](const char* name) {
    const std::string p = std::string("pathway.gru.") + name + ".";
    return GruGate{store.get(p + "input_weight"), store.get(p + "hidden_weight"),
                   store.get(p + "input_bias"), store.get(p + "hidden_bias")};
  };
  PathwayWeights w{gate("reset"), gate("update"), gate("candidate"),
                   store.get("pathway.predictor.weight"), store.get("pathway.predictor.bias")};
  return w;
}

// r = s(x Wir + bir + h Whr + bhr), u = s(x Wiu + biu + h Whu + bhu)
// n = tanh(x Win + bin + r * (h Whn + bhn)), h' = (1 - u) * n + u * h
inline Tensor gru_cell(const Tensor& x, const Tensor& h, const PathwayWeights& w) {
  auto pre = [&](const GruGate& g) {
    return std::pair{linear(x, g.input_w, g.input_b), linear(h, g.hidden_w, g.hidden_b)};
  };
  auto [xr, hr] = pre(w.reset);
  auto [xu, hu] = pre(w.update);
  auto [xn, hn] = pre(w.candidate);
  Tensor r = sigmoid(add(xr, hr));
  Tensor u = sigmoid(add(xu, hu));
  Tensor n = tanh(add(xn, multiply(r, hn)));
  return add(multiply(one_minus(u), n), multiply(u, h));
}

// Context vectors of the participating layers, each [B,d] (B = windows).
struct ContextState {
  std::vector<std::size_t> layers;
  std::vector<Tensor> c;

  static ContextState zeros(const PcConfig& cfg, std::size_t batch, std::size_t d) {
    ContextState s{cfg.layers, {}};
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) s.c.emplace_back(Shape{batch, d});
    return s;
  }

  const Tensor& at(std::size_t layer) const {
    auto it = std::lower_bound(layers.begin(), layers.end(), layer);
    if (it == layers.end() || *it != layer) {
      throw ContractError("context: layer " + std::to_string(layer) + " carries no context");
    }
    return c[static_cast<std::size_t>(it - layers.begin())];
  }
};

// One time step of the top-down recurrence. `z` holds all L layers' [CLS]
// vectors for this step (z[l-1] is [B,d]); layers run from the top down so
// c_t^{l+1} is available when layer l is computed.
inline ContextState top_down_step(const std::vector<Tensor>& z, const ContextState& prev,
                                  const PathwayWeights& w, const PcConfig& cfg) {
  const std::size_t d = w.dim();
  if (prev.layers != cfg.layers) throw ContractError("top_down_step: context/layer mismatch");
  if (cfg.layers.back() > z.size()) {
    throw ContractError("top_down_step: pc layer " + std::to_string(cfg.layers.back()) +
                        " beyond the " + std::to_string(z.size()) + " encoder layers");
  }
  const std::size_t batch = z.front().dim(0);
  for (std::size_t l : cfg.layers) {
    if (z[l - 1].shape() != Shape{batch, d} || prev.at(l).shape() != Shape{batch, d}) {
      throw ContractError("top_down_step: expected [" + std::to_string(batch) + "," +
                          std::to_string(d) + "] inputs at layer " + std::to_string(l) +
                          ", got " + shape_str(z[l - 1].shape()) + " and " +
                          shape_str(prev.at(l).shape()));
    }
  }
  ContextState next{cfg.layers, std::vector<Tensor>(cfg.layers.size())};
  const Tensor zero_upper({batch, d});
  for (std::size_t i = cfg.layers.size(); i-- > 0;) {
    const std::size_t l = cfg.layers[i];
    const bool has_upper = cfg.top_down && i + 1 < cfg.layers.size() && cfg.layers[i + 1] == l + 1;
    const Tensor& upper = has_upper ? next.c[i + 1] : zero_upper;
    next.c[i] = gru_cell(concat({z[l - 1], upper}, 1), prev.c[i], w);
  }
  return next;
}

// Predicted next-step [CLS] vectors, one [B,d] tensor per context layer.
inline std::vector<Tensor> predict_next(const ContextState& c, const PathwayWeights& w) {
  std::vector<Tensor> out;
  out.reserve(c.c.size());
  for (const auto& ctx : c.c) out.push_back(linear(ctx, w.predictor_w, w.predictor_b));
  return out;
}

struct PredictionPair {
  std::size_t time;   // 1-based index of the predicted step
  std::size_t layer;  // 1-based encoder layer
  Tensor predicted;   // [B,d]
  Tensor target;      // [B,d], ground truth z at (time, layer)
};

struct Rollout {
  std::vector<PredictionPair> pairs;
  std::vector<ContextState> contexts;  // contexts[t-1] is c_t
};

// Teacher-forced rollout over T steps: c_1 from z_1 and zeros, c_t from the
// ground-truth z_t and c_{t-1}. For t = 1..min(T-1, k) the prediction from c_t
// is paired with z_{t+1}. Predictions never feed back into the recurrence.
inline Rollout rollout(const std::vector<std::vector<Tensor>>& z_seq, const PathwayWeights& w,
                       const PcConfig& cfg) {
  if (z_seq.empty()) throw ContractError("rollout: needs at least one step");
  Rollout out;
  const std::size_t steps = std::min(z_seq.size() - 1, cfg.k);
  if (steps == 0) return out;
  ContextState c = ContextState::zeros(cfg, z_seq.front().front().dim(0), w.dim());
  for (std::size_t t = 1; t <= steps; ++t) {
    c = top_down_step(z_seq[t - 1], c, w, cfg);
    out.contexts.push_back(c);
    auto preds = predict_next(c, w);
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
      const std::size_t l = cfg.layers[i];
      out.pairs.push_back({t + 1, l, preds[i], z_seq[t][l - 1]});
    }
  }
  return out;
}

}  // namespace pclm
