#pragma once

// The pclm command line: pretrain, embed, probe, retrieve, inspect and
// make-corpus. run() returns the process exit code.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pclm/checkpoint.hpp"
#include "pclm/config.hpp"
#include "pclm/corpus.hpp"
#include "pclm/probe.hpp"
#include "pclm/synthetic.hpp"
#include "pclm/trainer.hpp"

namespace pclm::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::string checkpoint;
  std::string corpus;
};

inline RunConfig resolve_config(const CommonOptions& opt) {
  RunConfig cfg;
  ConfigKeys seen;
  if (!opt.config_path.empty()) load_config_file(opt.config_path, cfg, &seen);
  for (const auto& s : opt.sets) apply_override(cfg, s, &seen);
  if (!opt.checkpoint.empty()) cfg.paths.checkpoint = opt.checkpoint;
  if (!opt.corpus.empty()) cfg.paths.corpus = opt.corpus;
  apply_seed_env(cfg, seen);
  validate(cfg);
  return cfg;
}

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

// Non-blank lines of a text file, tokenized, with 1-based line numbers.
struct SentenceLine {
  std::size_t line;
  std::vector<std::string> words;
};

inline std::vector<SentenceLine> read_sentence_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<SentenceLine> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    auto words = tokenize(line);
    if (!words.empty()) out.push_back({n, std::move(words)});
  }
  if (out.empty()) throw EmptyCorpusError("no sentences in " + path.string());
  return out;
}

inline fs::path vocab_path_for(const RunConfig& cfg) {
  if (!cfg.paths.vocab.empty()) return cfg.paths.vocab;
  return fs::path(cfg.paths.checkpoint).parent_path() / "vocab.txt";
}

// A checkpoint plus everything needed to run its encoder.
struct LoadedModel {
  Checkpoint checkpoint;
  RunConfig config;  // architecture from the snapshot, everything else from the caller
  Vocab vocab;
  ParameterStore params;
};

inline LoadedModel load_model(const RunConfig& cfg) {
  if (cfg.paths.checkpoint.empty()) throw ConfigError("no checkpoint given (--checkpoint or paths.checkpoint)");
  LoadedModel m;
  m.checkpoint = load_checkpoint(cfg.paths.checkpoint);
  RunConfig snap;
  parse_config_text(m.checkpoint.config_snapshot, snap);
  m.config = cfg;
  m.config.encoder = snap.encoder;
  m.config.pc = snap.pc;
  m.config.train.seed = snap.train.seed;
  m.vocab = Vocab::load(vocab_path_for(cfg));
  if (m.vocab.size() != m.config.encoder.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(m.vocab.size()) + " entries but the checkpoint expects " +
                      std::to_string(m.config.encoder.vocab_size));
  }
  m.params = params_from_checkpoint(m.checkpoint, LoadMode::eval);
  return m;
}

inline std::vector<std::vector<TokenId>> encode_lines(const std::vector<SentenceLine>& lines, const Vocab& vocab) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(vocab.encode(l.words));
  return out;
}

inline std::uint64_t metrics_step(const std::string& line) {
  std::uint64_t step = 0;
  if (std::sscanf(line.c_str(), "step=%llu", reinterpret_cast<unsigned long long*>(&step)) != 1) {
    throw IoError("metrics.log: malformed line '" + line + "'");
  }
  return step;
}

// Drops lines after step `keep` so a resumed run continues the log.
inline void truncate_metrics(const fs::path& path, std::uint64_t keep) {
  if (!fs::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  std::string kept, line;
  while (std::getline(in, line)) {
    if (!line.empty() && metrics_step(line) <= keep) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << kept;
  if (!out) throw IoError("cannot rewrite " + path.string());
}

inline void check_resume_compatible(const Checkpoint& ckpt, const RunConfig& cfg) {
  RunConfig snap;
  parse_config_text(ckpt.config_snapshot, snap);
  snap.train.steps = cfg.train.steps;
  snap.train.checkpoint_every = cfg.train.checkpoint_every;
  snap.paths = cfg.paths;
  std::istringstream a(config_to_text(snap, false)), b(config_to_text(cfg, false));
  std::string la, lb;
  while (std::getline(a, la) && std::getline(b, lb)) {
    if (la != lb) throw ConfigError("resume: checkpoint has '" + la + "' but the config has '" + lb + "'");
  }
}

inline Checkpoint training_checkpoint(const RunConfig& cfg, const ParameterStore& params, const AdamState& opt) {
  Checkpoint c;
  c.config_snapshot = config_to_text(cfg, false);
  add_params(c, params);
  add_optimizer(c, opt, params);
  return c;
}

inline int cmd_pretrain(const CommonOptions& opt, const std::string& resume, std::ostream& out) {
  RunConfig cfg = resolve_config(opt);
  if (cfg.paths.corpus.empty()) throw ConfigError("no corpus given (--corpus or paths.corpus)");
  if (cfg.paths.output_dir.empty()) throw ConfigError("paths.output_dir is not set");
  const fs::path dir = cfg.paths.output_dir;

  const auto text = load_corpus(cfg.paths.corpus);
  Vocab vocab;
  if (!cfg.paths.vocab.empty()) {
    vocab = Vocab::load(cfg.paths.vocab);
  } else if (!resume.empty() && fs::exists(fs::path(resume).parent_path() / "vocab.txt")) {
    vocab = Vocab::load(fs::path(resume).parent_path() / "vocab.txt");
  } else {
    vocab = build_vocab(text, cfg.corpus.min_count);
  }
  if (cfg.encoder.vocab_size == 0) cfg.encoder.vocab_size = vocab.size();
  if (cfg.encoder.vocab_size != vocab.size()) {
    throw ConfigError("encoder.vocab_size is " + std::to_string(cfg.encoder.vocab_size) + " but the vocabulary has " +
                      std::to_string(vocab.size()) + " entries");
  }
  const TrainingData data = build_training_data(encode_corpus(text, vocab), cfg);

  ParameterStore params;
  AdamState optim;
  if (resume.empty()) {
    init_model(params, cfg);
  } else {
    const Checkpoint ckpt = load_checkpoint(resume);
    check_resume_compatible(ckpt, cfg);
    params = params_from_checkpoint(ckpt, LoadMode::train);
    if (!has_optimizer(ckpt)) throw CheckpointError("resume: " + resume + " has no optimizer state");
    optim = optimizer_from_checkpoint(ckpt, params);
  }

  fs::create_directories(dir);
  {
    std::ofstream cfg_out(dir / "config.cfg", std::ios::binary | std::ios::trunc);
    cfg_out << config_to_text(cfg);
    if (!cfg_out) throw IoError("cannot write " + (dir / "config.cfg").string());
  }
  vocab.save(dir / "vocab.txt");

  const fs::path log_path = dir / "metrics.log";
  if (resume.empty()) {
    std::ofstream(log_path, std::ios::binary | std::ios::trunc);
  } else {
    truncate_metrics(log_path, optim.step);
  }
  std::ofstream log(log_path, std::ios::binary | std::ios::app);
  if (!log) throw IoError("cannot write " + log_path.string());

  out << "windows=" << data.window_starts.size() << " vocab=" << vocab.size()
      << " params=" << param_count(params, CountMode::training) << " start_step=" << optim.step << "\n";
  train_loop(
      data, cfg, params, optim,
      [&](const StepMetrics& m) {
        log << format_metrics(m) << '\n';
        if (!log) throw IoError("write failure on " + log_path.string());
      },
      [&](std::uint64_t step) {
        log.flush();
        const fs::path p = dir / ("checkpoint-" + std::to_string(step) + ".pclm");
        save_checkpoint(training_checkpoint(cfg, params, optim), p);
        out << "saved " << p.string() << "\n";
      });
  log.flush();
  save_checkpoint(training_checkpoint(cfg, params, optim), dir / "model.pclm");
  out << "saved " << (dir / "model.pclm").string() << "\n";
  return kExitOk;
}

inline int cmd_embed(const CommonOptions& opt, const std::string& input, const std::string& output,
                     std::ostream& out) {
  const LoadedModel m = load_model(resolve_config(opt));
  const auto lines = read_sentence_lines(input);
  const auto emb = embed_sentences(encode_lines(lines, m.vocab), bind_encoder(m.params, m.config.encoder),
                                   m.config.encoder);
  std::ofstream file;
  if (!output.empty()) {
    file.open(output, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot write " + output);
  }
  std::ostream& dst = output.empty() ? out : file;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    dst << lines[i].line;
    for (double v : emb[i]) dst << '\t' << format_value(v);
    dst << '\n';
  }
  if (!dst) throw IoError("write failure on embeddings");
  return kExitOk;
}

inline int cmd_probe(const CommonOptions& opt, bool baseline, std::ostream& out, std::ostream& err) {
  const LoadedModel m = load_model(resolve_config(opt));
  const RunConfig& cfg = m.config;
  if (cfg.paths.corpus.empty()) throw ConfigError("no corpus given (--corpus or paths.corpus)");
  const auto docs = encode_corpus(load_corpus(cfg.paths.corpus), m.vocab);
  const auto table = SentenceTable::from(docs);
  const ProbeOptions popt{cfg.probe.l2, cfg.probe.max_iter, cfg.probe.tolerance};

  std::vector<std::pair<std::string, ParameterStore>> models;
  models.emplace_back("", m.params.clone());
  if (baseline) {
    ParameterStore fresh;
    init_model(fresh, cfg);
    models.emplace_back(" model=untrained", std::move(fresh));
  }
  for (const auto& [suffix, params] : models) {
    const auto emb = embed_sentences(table.sentences, bind_encoder(params, cfg.encoder), cfg.encoder);
    std::map<std::string, double> sum;
    std::vector<std::string> order;
    for (std::uint64_t seed = 1; seed <= cfg.probe.seeds; ++seed) {
      Rng rng(seed);
      for (const auto& task : make_synthetic_tasks(docs, rng, cfg.probe.examples)) {
        const ProbeResult r = run_probe(task, emb, popt);
        if (!r.converged) err << "warning: probe for task " << task.name << " seed " << seed << " did not converge\n";
        out << "task=" << task.name << " seed=" << seed << " acc=" << format_value(r.accuracy) << suffix << "\n";
        if (!sum.contains(task.name)) order.push_back(task.name);
        sum[task.name] += r.accuracy;
      }
    }
    for (const auto& name : order) {
      out << "task=" << name << " mean=" << format_value(sum[name] / static_cast<double>(cfg.probe.seeds))
          << suffix << "\n";
    }
  }
  return kExitOk;
}

inline int cmd_retrieve(const CommonOptions& opt, const std::string& query, std::size_t k, std::ostream& out,
                        std::ostream& err) {
  const LoadedModel m = load_model(resolve_config(opt));
  if (m.config.paths.corpus.empty()) throw ConfigError("no corpus given (--corpus or paths.corpus)");
  const auto lines = read_sentence_lines(m.config.paths.corpus);
  const auto enc = bind_encoder(m.params, m.config.encoder);
  const auto emb = embed_sentences(encode_lines(lines, m.vocab), enc, m.config.encoder);
  const auto q = embed_sentence(m.vocab.encode(tokenize(query)), enc, m.config.encoder);
  const RetrievalResult r = knn_retrieve(q, emb, k);
  if (r.query_zero) err << "warning: query embedding has zero norm\n";
  for (std::size_t i : r.excluded) err << "warning: line " << lines[i].line << " has a zero-norm embedding\n";
  for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
    const auto& n = r.neighbors[i];
    out << "rank=" << i + 1 << " line=" << lines[n.index].line << " score=" << format_value(n.score) << '\t'
        << join(lines[n.index].words) << "\n";
  }
  return kExitOk;
}

inline int cmd_inspect(const CommonOptions& opt, std::ostream& out) {
  RunConfig cfg = resolve_config(opt);
  if (cfg.paths.checkpoint.empty()) throw ConfigError("no checkpoint given (--checkpoint or paths.checkpoint)");
  const Checkpoint ckpt = load_checkpoint(cfg.paths.checkpoint);
  RunConfig snap;
  parse_config_text(ckpt.config_snapshot, snap);
  std::size_t encoder = 0, pathway = 0;
  for (const auto& [name, t] : ckpt.records) {
    if (name.starts_with(kEncoderPrefix)) encoder += t.numel();
    if (name.starts_with(kPathwayPrefix)) pathway += t.numel();
  }
  if (pathway == 0) {
    ParameterStore fresh;
    Rng rng(0);
    init_pathway(fresh, snap.encoder.hidden_dim, rng);
    pathway = fresh.scalar_count();
  }
  out << "training_params=" << encoder + pathway << "\n";
  out << "inference_params=" << encoder << "\n";
  out << "optimizer_step=" << (has_optimizer(ckpt) ? std::to_string(static_cast<std::uint64_t>(
                                                         ckpt.records.at("optim.step").item()))
                                                   : std::string("none"))
      << "\n";
  out << "# config\n" << ckpt.config_snapshot;
  return kExitOk;
}

inline int cmd_make_corpus(const std::string& output, std::size_t documents, std::uint64_t seed, std::ostream& out) {
  SyntheticSpec spec;
  spec.documents = documents;
  spec.seed = seed;
  const auto sc = make_synthetic_corpus(spec);
  write_corpus(sc.documents, output);
  out << "wrote " << sc.documents.size() << " documents to " << output << "\n";
  return kExitOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Predictive-coding masked language model", "pclm"};
  app.require_subcommand(1);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub, bool checkpoint, bool corpus) {
    sub->add_option("-c,--config", common.config_path, "config file (key: value lines)")->check(CLI::ExistingFile);
    sub->add_option("--set", common.sets, "override a config key, key=value")->allow_extra_args(false);
    if (checkpoint) sub->add_option("--checkpoint", common.checkpoint, "checkpoint file");
    if (corpus) sub->add_option("--corpus", common.corpus, "corpus file");
  };

  std::string resume;
  auto* pretrain = app.add_subcommand("pretrain", "train a model on a corpus");
  add_common(pretrain, false, true);
  pretrain->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  std::string input, output;
  auto* embed = app.add_subcommand("embed", "write sentence embeddings as TSV");
  add_common(embed, true, false);
  embed->add_option("--input", input, "one sentence per line")->required()->check(CLI::ExistingFile);
  embed->add_option("-o,--output", output, "output file (default stdout)");

  bool baseline = false;
  double l2 = -1.0;
  auto* probe = app.add_subcommand("probe", "logistic-regression probes on synthetic sentence-pair tasks");
  add_common(probe, true, true);
  probe->add_option("--l2", l2, "probe L2 penalty");
  probe->add_flag("--baseline", baseline, "also probe the untrained encoder");

  std::string query;
  std::size_t k = 3;
  auto* retrieve = app.add_subcommand("retrieve", "nearest corpus sentences by cosine similarity");
  add_common(retrieve, true, true);
  retrieve->add_option("-q,--query", query, "query sentence")->required();
  retrieve->add_option("-k", k, "number of neighbours")->check(CLI::PositiveNumber);

  auto* inspect = app.add_subcommand("inspect", "parameter counts and config of a checkpoint");
  add_common(inspect, true, false);

  std::string corpus_out;
  std::size_t documents = 200;
  std::uint64_t corpus_seed = 1;
  auto* make_corpus = app.add_subcommand("make-corpus", "write the synthetic discourse corpus");
  make_corpus->add_option("-o,--output", corpus_out, "output file")->required();
  make_corpus->add_option("--documents", documents, "number of documents")->check(CLI::PositiveNumber);
  make_corpus->add_option("--seed", corpus_seed, "generator seed");

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\nrun 'pclm --help' for usage\n";
    return kExitUsage;
  }

  try {
    if (l2 >= 0.0) common.sets.push_back("probe.l2=" + format_value(l2));
    if (pretrain->parsed()) return cmd_pretrain(common, resume, out);
    if (embed->parsed()) return cmd_embed(common, input, output, out);
    if (probe->parsed()) return cmd_probe(common, baseline, out, err);
    if (retrieve->parsed()) return cmd_retrieve(common, query, k, out, err);
    if (inspect->parsed()) return cmd_inspect(common, out);
    if (make_corpus->parsed()) return cmd_make_corpus(corpus_out, documents, corpus_seed, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitUsage;
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"pclm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace pclm::cli
