#pragma once

// Corpus ingestion: one sentence per line, a blank line between documents.
// Word-level lowercase tokenization, overlapping sentence groups, and dynamic
// masking for the masked-LM objective.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pclm/error.hpp"
#include "pclm/rng.hpp"

namespace pclm {

using TokenId = std::uint32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kNumSpecial = 5;

inline constexpr const char* kSpecialTokens[kNumSpecial] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                            "[MASK]"};

inline bool is_special(TokenId id) { return id == kPad || id == kCls || id == kSep; }

// Whitespace split, ASCII lowercased. Bytes >= 0x80 pass through untouched.
inline std::vector<std::string> tokenize(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Tokenized text of one paragraph.
struct TextDocument {
  std::vector<std::vector<std::string>> sentences;
};

inline std::vector<TextDocument> parse_corpus(std::istream& in) {
  std::vector<TextDocument> docs;
  TextDocument cur;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto tokens = tokenize(line);
    if (tokens.empty()) {
      if (!cur.sentences.empty()) docs.push_back(std::move(cur));
      cur = {};
    } else {
      cur.sentences.push_back(std::move(tokens));
    }
  }
  if (!cur.sentences.empty()) docs.push_back(std::move(cur));
  return docs;
}

inline std::vector<TextDocument> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_corpus: cannot read " + path.string());
  auto docs = parse_corpus(in);
  if (in.bad()) throw IoError("load_corpus: read failure on " + path.string());
  if (docs.empty()) throw EmptyCorpusError("load_corpus: no documents in " + path.string());
  return docs;
}

class Vocab {
 public:
  Vocab() {
    for (TokenId i = 0; i < kNumSpecial; ++i) push(kSpecialTokens[i]);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.contains(token); }

  std::vector<TokenId> encode(const std::vector<std::string>& words) const {
    std::vector<TokenId> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

  // One token per line; line number is the id.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("vocab: cannot write " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) throw IoError("vocab: write failure on " + path.string());
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("vocab: cannot read " + path.string());
    Vocab v;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (n < kNumSpecial) {
        if (line != kSpecialTokens[n]) {
          throw IoError("vocab: line " + std::to_string(n + 1) + " must be " +
                        kSpecialTokens[n]);
        }
      } else {
        if (v.contains(line)) throw IoError("vocab: duplicate token '" + line + "'");
        v.push(line);
      }
      ++n;
    }
    if (n < kNumSpecial) throw IoError("vocab: missing special tokens in " + path.string());
    return v;
  }

  void push(const std::string& token) {
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(token);
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Specials first, then tokens with count >= min_count ordered by descending
// count and then lexicographically.
inline Vocab build_vocab(const std::vector<TextDocument>& docs, std::size_t min_count = 1) {
  if (min_count < 1) throw ContractError("build_vocab: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& d : docs)
    for (const auto& s : d.sentences)
      for (const auto& w : s) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [w, c] : counts)
    if (c >= min_count) ranked.emplace_back(w, c);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [w, c] : ranked) {
    if (!v.contains(w)) v.push(w);
  }
  return v;
}

// A paragraph as token ids.
struct Document {
  std::vector<std::vector<TokenId>> sentences;
};

inline std::vector<Document> encode_corpus(const std::vector<TextDocument>& docs,
                                           const Vocab& vocab) {
  std::vector<Document> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    Document doc;
    for (const auto& s : d.sentences) doc.sentences.push_back(vocab.encode(s));
    out.push_back(std::move(doc));
  }
  return out;
}

// Half-open sentence range [begin, end).
struct SentenceSpan {
  std::size_t begin;
  std::size_t end;
  std::size_t size() const { return end - begin; }
  bool operator==(const SentenceSpan&) const = default;
};

// Groups of `group_size` sentences with stride group_size - 1, so consecutive
// groups share exactly one sentence. The last group may be partial; it always
// holds at least one sentence the previous group did not.
inline std::vector<SentenceSpan> group_with_overlap(std::size_t num_sentences,
                                                    std::size_t group_size = 3) {
  if (group_size < 2) throw ContractError("group_with_overlap: group_size must be >= 2");
  std::vector<SentenceSpan> groups;
  if (num_sentences == 0) return groups;
  const std::size_t stride = group_size - 1;
  for (std::size_t start = 0;; start += stride) {
    const std::size_t end = std::min(start + group_size, num_sentences);
    groups.push_back({start, end});
    if (end == num_sentences) break;
  }
  return groups;
}

struct SequenceGroup {
  std::vector<TokenId> token_ids;  // exactly max_len, [CLS] first
  std::size_t doc_id = 0;
  std::size_t group_index = 0;
  SentenceSpan covered{0, 0};
};

// [CLS] s1 [SEP] s2 [SEP] ... [SEP], cut at max_len, then [PAD]-filled.
inline std::vector<TokenId> tokenize_truncate_pad(
    const std::vector<std::vector<TokenId>>& sentences, std::size_t max_len) {
  if (max_len < 4) throw ContractError("tokenize_truncate_pad: max_len must be >= 4");
  std::vector<TokenId> ids{kCls};
  for (const auto& s : sentences) {
    ids.insert(ids.end(), s.begin(), s.end());
    ids.push_back(kSep);
  }
  ids.resize(max_len, kPad);
  return ids;
}

inline std::vector<SequenceGroup> make_groups(const Document& doc, std::size_t doc_id,
                                              std::size_t max_len, std::size_t group_size = 3) {
  std::vector<SequenceGroup> out;
  const auto spans = group_with_overlap(doc.sentences.size(), group_size);
  for (std::size_t t = 0; t < spans.size(); ++t) {
    std::vector<std::vector<TokenId>> sents(doc.sentences.begin() + spans[t].begin,
                                            doc.sentences.begin() + spans[t].end);
    out.push_back({tokenize_truncate_pad(sents, max_len), doc_id, t, spans[t]});
  }
  return out;
}

struct MaskedBatch {
  std::vector<SequenceGroup> groups;  // corrupted inputs
  std::vector<std::vector<std::size_t>> masked_positions;
  std::vector<std::vector<TokenId>> mlm_targets;  // original ids at masked positions
  std::uint64_t rng_seed = 0;

  std::size_t num_masked() const {
    std::size_t n = 0;
    for (const auto& p : masked_positions) n += p.size();
    return n;
  }
};

// Each non-special token is selected with probability mask_rate; a selected
// token becomes [MASK] 80% of the time, a random non-special token 10%, and is
// kept 10%. The whole pattern is a function of `seed`.
inline MaskedBatch dynamic_mask_seeded(const std::vector<SequenceGroup>& groups,
                                       double mask_rate, std::size_t vocab_size,
                                       std::uint64_t seed) {
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) {
    throw ContractError("dynamic_mask: mask_rate must lie in [0, 1]");
  }
  MaskedBatch batch;
  batch.rng_seed = seed;
  Rng local(seed);
  batch.groups = groups;
  batch.masked_positions.resize(groups.size());
  batch.mlm_targets.resize(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& ids = batch.groups[g].token_ids;
    for (std::size_t pos = 0; pos < ids.size(); ++pos) {
      if (is_special(ids[pos])) continue;
      if (!local.bernoulli(mask_rate)) continue;
      batch.masked_positions[g].push_back(pos);
      batch.mlm_targets[g].push_back(ids[pos]);
      const double r = local.uniform();
      if (r < 0.8 || vocab_size <= kNumSpecial) {
        ids[pos] = kMask;
      } else if (r < 0.9) {
        ids[pos] = kNumSpecial + static_cast<TokenId>(local.below(vocab_size - kNumSpecial));
      }
    }
  }
  return batch;
}

// Draws a fresh seed from `rng` on every call, so re-feeding a sequence never
// reuses a pattern.
inline MaskedBatch dynamic_mask(const std::vector<SequenceGroup>& groups, double mask_rate,
                                std::size_t vocab_size, Rng& rng) {
  return dynamic_mask_seeded(groups, mask_rate, vocab_size, rng.next_u64());
}

}  // namespace pclm
