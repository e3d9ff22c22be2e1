#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sslc/rng.hpp"

namespace sslc::corpus {

// One record of a JSONL dataset. The id is the (1-based) source line number
// and stays stable through splitting.
struct Example {
  std::string text;
  std::optional<std::string> label;  // "/"-separated path, leaf = class
  std::int64_t id = 0;
};

bool operator==(const Example& a, const Example& b);

struct LoadResult {
  std::vector<Example> examples;
  std::size_t skipped = 0;  // empty-after-trim records
};

// Loads a UTF-8 JSONL file; schema {"text": ...} plus {"label": ...} when
// labeled. Malformed lines and missing fields raise with the line number.
LoadResult load_dataset(const std::string& path, bool labeled);
LoadResult load_dataset_text(const std::string& content, bool labeled,
                             const std::string& where);

std::string to_jsonl(const std::vector<Example>& examples);
void save_dataset(const std::string& path, const std::vector<Example>& examples);

// Bijection between distinct label paths and dense class indices,
// lexicographically ordered.
class LabelIndex {
 public:
  LabelIndex() = default;
  static LabelIndex build(const std::vector<Example>& labeled);
  // Rebuild from an already-ordered label list (checkpoint restore).
  static LabelIndex from_labels(std::vector<std::string> labels);

  std::size_t num_classes() const { return labels_.size(); }
  std::size_t index_of(const std::string& label) const;
  const std::string& label_of(std::size_t index) const;
  const std::vector<std::string>& labels() const { return labels_; }
  std::size_t max_depth() const;

 private:
  std::vector<std::string> labels_;
  std::map<std::string, std::size_t> index_;
};

enum class TokenizerMode { Word, Char };

std::string tokenizer_mode_name(TokenizerMode mode);
TokenizerMode tokenizer_mode_from_name(const std::string& name);

// Word mode: lowercase + split on unicode whitespace. Char mode: one token
// per non-space codepoint.
std::vector<std::string> tokenize(const std::string& text, TokenizerMode mode);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  // Tokens sorted by (frequency desc, token asc), capped at max_size
  // including PAD/UNK; tokens below min_freq dropped.
  static Vocabulary build(const std::vector<std::string>& texts,
                          TokenizerMode mode, std::size_t min_freq,
                          std::size_t max_size);

  std::size_t size() const { return tokens_.size(); }
  TokenizerMode mode() const { return mode_; }
  int id_of(const std::string& token) const;  // kUnk when absent
  const std::string& token_of(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  TokenizerMode mode_ = TokenizerMode::Word;
  std::vector<std::string> tokens_;  // position == id
  std::map<std::string, int> ids_;
};

struct TokenSeq {
  std::vector<std::string> tokens;
  std::vector<int> ids;
  bool truncated = false;
};

bool operator==(const TokenSeq& a, const TokenSeq& b);

// Tokenize + id-encode, truncated to max_len. Raises "no tokens" on text
// that tokenizes to nothing.
TokenSeq tokenize_encode(const std::string& text, const Vocabulary& vocab,
                         std::size_t max_len);

// Re-encode an already-tokenized sequence (used after augmentation).
TokenSeq encode_tokens(std::vector<std::string> tokens, const Vocabulary& vocab,
                       std::size_t max_len);

struct SplitRatios {
  double labeled_train = 0.8;
  double labeled_test = 0.2;
  double unlabeled_uda = 0.5;
  double unlabeled_contrastive = 0.5;
};

struct DatasetSplit {
  std::vector<Example> train;
  std::vector<Example> test;
  std::vector<Example> uda_pool;
  std::vector<Example> contrastive_pool;
  std::uint64_t seed = 0;
};

// Deterministic disjoint split; each pool's ratios must be positive and sum
// to 1 (within 1e-9).
DatasetSplit split_dataset(const std::vector<Example>& labeled,
                           const std::vector<Example>& unlabeled,
                           const SplitRatios& ratios, std::uint64_t seed);

}  // namespace sslc::corpus
