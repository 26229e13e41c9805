#pragma once

// Run configuration: a flat text file of "key: value" lines with dotted keys,
// '#' comment lines, and "key=value" overrides on top.

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pclm/encoder.hpp"
#include "pclm/error.hpp"
#include "pclm/optim.hpp"
#include "pclm/pcnet.hpp"

namespace pclm {

// Toy-scale defaults.
struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch_windows = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 7;
  double mask_rate = 0.1;
  std::size_t checkpoint_every = 1000;  // 0: final checkpoint only
  double nsm_weight = 1.0;
  double mlm_weight = 1.0;

  AdamConfig adam() const { return {lr, beta1, beta2, eps, weight_decay}; }
};

struct PcSettings {
  PcMode mode = PcMode::full;
  std::size_t k = 2;
};

struct CorpusConfig {
  std::size_t min_count = 1;
  std::size_t group_size = 3;
};

struct ProbeConfig {
  double l2 = 1e-4;
  std::size_t seeds = 10;
  std::size_t max_iter = 10000;
  double tolerance = 1e-6;
  std::size_t examples = 0;  // per task; 0 uses every usable pair
};

struct PathConfig {
  std::string corpus;
  std::string vocab;  // default: vocab.txt next to the checkpoint
  std::string checkpoint;
  std::string output_dir;
};

struct RunConfig {
  EncoderConfig encoder;
  PcSettings pc;
  TrainConfig train;
  CorpusConfig corpus;
  ProbeConfig probe;
  PathConfig paths;

  PcConfig pc_config() const { return PcConfig::for_mode(pc.mode, encoder.num_layers, pc.k); }
};

namespace detail {

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc{} || p != end) {
    throw ConfigError("config: '" + key + "' expects a " +
                      (std::is_floating_point_v<T> ? "real" : "non-negative integer") +
                      ", got '" + text + "'");
  }
  return v;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto size = [&](std::string key, auto member) {
      f.push_back({key, [member](const RunConfig& c) { return std::to_string(member(c)); },
                   [member, key](RunConfig& c, const std::string& v) {
                     member(c) = detail::parse_number<std::size_t>(key, v);
                   }});
    };
    auto real = [&](std::string key, auto member) {
      f.push_back({key, [member](const RunConfig& c) { return detail::format_real(member(c)); },
                   [member, key](RunConfig& c, const std::string& v) {
                     member(c) = detail::parse_number<double>(key, v);
                   }});
    };
    auto text = [&](std::string key, auto member) {
      f.push_back({key, [member](const RunConfig& c) { return member(c); },
                   [member](RunConfig& c, const std::string& v) { member(c) = v; }});
    };
    size("encoder.layers", [](auto& c) -> auto& { return c.encoder.num_layers; });
    size("encoder.hidden", [](auto& c) -> auto& { return c.encoder.hidden_dim; });
    size("encoder.heads", [](auto& c) -> auto& { return c.encoder.num_heads; });
    size("encoder.ffn", [](auto& c) -> auto& { return c.encoder.ffn_dim; });
    size("encoder.max_len", [](auto& c) -> auto& { return c.encoder.max_len; });
    size("encoder.vocab_size", [](auto& c) -> auto& { return c.encoder.vocab_size; });
    real("encoder.dropout", [](auto& c) -> auto& { return c.encoder.dropout; });
    f.push_back({"pc.mode", [](const RunConfig& c) { return std::string(to_string(c.pc.mode)); },
                 [](RunConfig& c, const std::string& v) { c.pc.mode = parse_pc_mode(v); }});
    size("pc.k", [](auto& c) -> auto& { return c.pc.k; });
    size("train.steps", [](auto& c) -> auto& { return c.train.steps; });
    size("train.batch_windows", [](auto& c) -> auto& { return c.train.batch_windows; });
    real("train.lr", [](auto& c) -> auto& { return c.train.lr; });
    real("train.weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; });
    real("train.beta1", [](auto& c) -> auto& { return c.train.beta1; });
    real("train.beta2", [](auto& c) -> auto& { return c.train.beta2; });
    real("train.eps", [](auto& c) -> auto& { return c.train.eps; });
    f.push_back({"train.seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
                 [](RunConfig& c, const std::string& v) {
                   c.train.seed = detail::parse_number<std::uint64_t>("train.seed", v);
                 }});
    real("train.mask_rate", [](auto& c) -> auto& { return c.train.mask_rate; });
    size("train.checkpoint_every", [](auto& c) -> auto& { return c.train.checkpoint_every; });
    real("train.nsm_weight", [](auto& c) -> auto& { return c.train.nsm_weight; });
    real("train.mlm_weight", [](auto& c) -> auto& { return c.train.mlm_weight; });
    size("corpus.min_count", [](auto& c) -> auto& { return c.corpus.min_count; });
    size("corpus.group_size", [](auto& c) -> auto& { return c.corpus.group_size; });
    real("probe.l2", [](auto& c) -> auto& { return c.probe.l2; });
    size("probe.seeds", [](auto& c) -> auto& { return c.probe.seeds; });
    size("probe.max_iter", [](auto& c) -> auto& { return c.probe.max_iter; });
    real("probe.tolerance", [](auto& c) -> auto& { return c.probe.tolerance; });
    size("probe.examples", [](auto& c) -> auto& { return c.probe.examples; });
    text("paths.corpus", [](auto& c) -> auto& { return c.paths.corpus; });
    text("paths.vocab", [](auto& c) -> auto& { return c.paths.vocab; });
    text("paths.checkpoint", [](auto& c) -> auto& { return c.paths.checkpoint; });
    text("paths.output_dir", [](auto& c) -> auto& { return c.paths.output_dir; });
    return f;
  }();
  return fields;
}

inline const ConfigField& config_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return f;
  throw ConfigError("config: unknown key '" + key + "'");
}

// Keys set explicitly by a file or override, so defaults can be told apart.
using ConfigKeys = std::set<std::string>;

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value,
                             ConfigKeys* seen = nullptr) {
  config_field(key).set(cfg, value);
  if (seen) seen->insert(key);
}

inline void parse_config_text(const std::string& text, RunConfig& cfg, ConfigKeys* seen = nullptr) {
  std::istringstream in(text);
  std::string line;
  ConfigKeys here;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto colon = t.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("config line " + std::to_string(n) + ": expected 'key: value', got '" + t + "'");
    }
    const std::string key = detail::trim(t.substr(0, colon));
    if (!here.insert(key).second) {
      throw ConfigError("config line " + std::to_string(n) + ": duplicate key '" + key + "'");
    }
    set_config_value(cfg, key, detail::trim(t.substr(colon + 1)), seen);
  }
}

inline void load_config_file(const std::filesystem::path& path, RunConfig& cfg,
                             ConfigKeys* seen = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("config: cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  parse_config_text(ss.str(), cfg, seen);
}

// "key=value"
inline void apply_override(RunConfig& cfg, const std::string& assignment, ConfigKeys* seen = nullptr) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' must look like key=value");
  }
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)),
                   detail::trim(assignment.substr(eq + 1)), seen);
}

inline std::string config_to_text(const RunConfig& cfg, bool include_paths = true) {
  std::string out;
  for (const auto& f : config_fields()) {
    if (!include_paths && f.key.starts_with("paths.")) continue;
    out += f.key + ": " + f.get(cfg) + "\n";
  }
  return out;
}

// Applies PCLM_SEED when no seed was configured explicitly.
inline void apply_seed_env(RunConfig& cfg, const ConfigKeys& seen) {
  if (seen.contains("train.seed")) return;
  if (const char* env = std::getenv("PCLM_SEED"); env && *env) {
    cfg.train.seed = detail::parse_number<std::uint64_t>("PCLM_SEED", env);
  }
}

// Everything except the vocabulary size, which may still be derived.
inline void validate(const RunConfig& cfg) {
  EncoderConfig enc = cfg.encoder;
  if (enc.vocab_size == 0) enc.vocab_size = kNumSpecial + 1;
  enc.validate();
  const auto& t = cfg.train;
  if (t.steps < 1) throw ConfigError("train.steps must be >= 1");
  if (t.batch_windows < 1) throw ConfigError("train.batch_windows must be >= 1");
  if (!(t.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(t.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(t.beta1 >= 0.0 && t.beta1 < 1.0) || !(t.beta2 >= 0.0 && t.beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(t.eps > 0.0)) throw ConfigError("train.eps must be > 0");
  if (!(t.mask_rate >= 0.0 && t.mask_rate <= 1.0)) throw ConfigError("train.mask_rate must lie in [0, 1]");
  if (!(t.nsm_weight >= 0.0) || !(t.mlm_weight >= 0.0)) {
    throw ConfigError("train.nsm_weight and train.mlm_weight must be >= 0");
  }
  if (cfg.pc.k < 1) throw ConfigError("pc.k must be >= 1");
  cfg.pc_config().validate(cfg.encoder.num_layers);
  if (cfg.corpus.min_count < 1) throw ConfigError("corpus.min_count must be >= 1");
  if (cfg.corpus.group_size < 2) throw ConfigError("corpus.group_size must be >= 2");
  if (!(cfg.probe.l2 >= 0.0)) throw ConfigError("probe.l2 must be >= 0");
  if (cfg.probe.seeds < 1) throw ConfigError("probe.seeds must be >= 1");
  if (cfg.probe.max_iter < 1) throw ConfigError("probe.max_iter must be >= 1");
}

}  // namespace pclm
