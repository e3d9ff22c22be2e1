#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sslc/corpus.hpp"
#include "sslc/rng.hpp"

namespace sslc::augment {

// Substitution table, token -> alternatives. Serves synonym and antonym
// entries alike; file format is a single JSON object of string arrays.
using Lexicon = std::map<std::string, std::vector<std::string>>;

Lexicon load_lexicon(const std::string& path);
Lexicon lexicon_from_json(const std::string& text, const std::string& where);

struct EdaProbs {
  double p_insert = 0.0;
  double p_delete = 0.0;
  double p_replace = 0.0;
};

struct AugConfig {
  double dup_rate = 0.32;
  EdaProbs eda;
  double tfidf_replace_p = 0.0;
  double neg_sim_threshold = 0.0;  // 0 disables negative construction
  std::optional<std::string> lexicon_path;
};

struct WordRepetitionResult {
  corpus::TokenSeq seq;
  // Output indices of the inserted duplicates; removing exactly these
  // restores the input.
  std::vector<std::size_t> inserted_positions;
  std::size_t dup_len = 0;
};

// Duplicates dup_len randomly chosen tokens in place, where dup_len is drawn
// uniformly from {0, ..., min(N, max(2, int(dup_rate * N)))}.
WordRepetitionResult word_repetition(const corpus::TokenSeq& tokens,
                                     double dup_rate, Rng& rng);

std::size_t word_repetition_bound(std::size_t n, double dup_rate);

// Random deletion (keeping at least one token), per-gap synonym insertion,
// per-token lexicon replacement, in that order. Inserted and replaced tokens
// are id-encoded through vocab.
corpus::TokenSeq eda_transform(const corpus::TokenSeq& tokens,
                               const EdaProbs& probs, const Lexicon& lexicon,
                               const corpus::Vocabulary& vocab, Rng& rng);

struct TfidfReplaceResult {
  corpus::TokenSeq seq;
  bool empty_pool = false;  // warning flag: nothing to sample from
};

// Scores each token as mean in-document frequency times idf over the given
// documents; higher means more informative.
std::map<std::string, double> build_tfidf(
    const std::vector<std::vector<std::string>>& docs);

// Replaces the ceil(p*N) lowest-scoring positions with draws from the
// table's low-score pool (entries at or below the lower-median score).
// Tokens absent from the table score 0.
TfidfReplaceResult tfidf_replace(const corpus::TokenSeq& tokens,
                                 const std::map<std::string, double>& tfidf,
                                 double p, const corpus::Vocabulary& vocab,
                                 Rng& rng);

class BackTranslator {
 public:
  // Built-in default: lexicon round-trip substitution.
  static BackTranslator lexicon_roundtrip(Lexicon lexicon);
  static BackTranslator identity();
  // External hook: shell command, text on stdin, translation on stdout.
  static BackTranslator external(std::string command);

  std::string translate(const std::string& text) const;
  std::size_t fallback_count() const { return fallbacks_; }

 private:
  BackTranslator() = default;
  enum class Kind { Identity, Lexicon, External } kind_ = Kind::Identity;
  Lexicon lexicon_;
  std::string command_;
  mutable std::size_t fallbacks_ = 0;
};

// Token-level Levenshtein distance, unit costs.
std::size_t edit_distance(const std::vector<std::string>& a,
                          const std::vector<std::string>& b);

// 1 - dist / max(|a|, |b|); 1.0 for two empty sequences.
double edit_similarity(const std::vector<std::string>& a,
                       const std::vector<std::string>& b);

enum class Polarity { Positive, Negative };

struct ContrastivePair {
  corpus::TokenSeq anchor;
  corpus::TokenSeq view;
  Polarity polarity = Polarity::Positive;
  int pseudo_label = 10;  // round(similarity * 10)
};

struct ContrastiveBatch {
  std::vector<ContrastivePair> pairs;
  std::size_t rejected_negatives = 0;
};

// One word-repetition positive per text; when EDA probabilities and the
// similarity threshold allow, also one EDA negative whose edit similarity
// falls below neg_sim_threshold (up to 5 attempts each).
ContrastiveBatch build_contrastive_batch(
    const std::vector<corpus::TokenSeq>& texts, const AugConfig& cfg,
    const Lexicon& lexicon, const corpus::Vocabulary& vocab, Rng& rng);

}  // namespace sslc::augment
