#pragma once

// Synthetic discourse corpus. Each sentence instantiates one of a fixed set of
// templates; the template of the next sentence is a fixed function of the
// current one. A template contributes its own keywords plus the lead keyword
// of its successor, and the rest of the sentence is random filler.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pclm/corpus.hpp"
#include "pclm/error.hpp"
#include "pclm/rng.hpp"

namespace pclm {

struct SyntheticSpec {
  std::size_t documents = 200;
  std::size_t templates = 16;
  std::size_t keywords_per_template = 3;
  std::size_t filler_vocab = 200;
  std::size_t min_filler = 4;
  std::size_t max_filler = 7;
  std::size_t min_sentences = 8;
  std::size_t max_sentences = 16;
  std::uint64_t seed = 1;
};

struct SyntheticCorpus {
  std::vector<TextDocument> documents;
  std::vector<std::vector<std::size_t>> template_ids;  // per document, per sentence
  std::vector<std::size_t> successor;                 // template -> next template
};

inline std::string synthetic_keyword(std::size_t tmpl, std::size_t k) {
  return "t" + std::to_string(tmpl) + "k" + std::to_string(k);
}

inline SyntheticCorpus make_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.templates < 2 || spec.keywords_per_template < 1 || spec.filler_vocab < 1 ||
      spec.min_filler > spec.max_filler || spec.min_sentences < 1 ||
      spec.min_sentences > spec.max_sentences) {
    throw ConfigError("synthetic corpus: inconsistent generator settings");
  }
  Rng rng(spec.seed);
  SyntheticCorpus out;
  // successor is a single cycle through a shuffled order of the templates
  std::vector<std::size_t> cycle(spec.templates);
  for (std::size_t i = 0; i < cycle.size(); ++i) cycle[i] = i;
  rng.shuffle(cycle.begin(), cycle.end());
  out.successor.resize(spec.templates);
  for (std::size_t i = 0; i < cycle.size(); ++i) out.successor[cycle[i]] = cycle[(i + 1) % cycle.size()];

  for (std::size_t d = 0; d < spec.documents; ++d) {
    TextDocument doc;
    std::vector<std::size_t> ids;
    const std::size_t n =
        spec.min_sentences + rng.below(spec.max_sentences - spec.min_sentences + 1);
    std::size_t tmpl = rng.below(spec.templates);
    for (std::size_t s = 0; s < n; ++s, tmpl = out.successor[tmpl]) {
      std::vector<std::string> words;
      for (std::size_t k = 0; k < spec.keywords_per_template; ++k) {
        words.push_back(synthetic_keyword(tmpl, k));
      }
      words.push_back(synthetic_keyword(out.successor[tmpl], 0));
      const std::size_t fill = spec.min_filler + rng.below(spec.max_filler - spec.min_filler + 1);
      for (std::size_t f = 0; f < fill; ++f) words.push_back("w" + std::to_string(rng.below(spec.filler_vocab)));
      rng.shuffle(words.begin(), words.end());
      doc.sentences.push_back(std::move(words));
      ids.push_back(tmpl);
    }
    out.documents.push_back(std::move(doc));
    out.template_ids.push_back(std::move(ids));
  }
  return out;
}

inline void write_corpus(const std::vector<TextDocument>& docs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (d) out << '\n';
    for (const auto& s : docs[d].sentences) {
      for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
      out << '\n';
    }
  }
  if (!out) throw IoError("write failure on " + path.string());
}

}  // namespace pclm
