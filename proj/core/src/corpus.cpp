#include "sslc/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "jsonio.hpp"
#include "sslc/util.hpp"

namespace sslc::corpus {

using jsonio::json;

bool operator==(const Example& a, const Example& b) {
  return a.text == b.text && a.label == b.label && a.id == b.id;
}

bool operator==(const TokenSeq& a, const TokenSeq& b) {
  return a.tokens == b.tokens && a.ids == b.ids && a.truncated == b.truncated;
}

LoadResult load_dataset_text(const std::string& content, bool labeled,
                             const std::string& where) {
  LoadResult result;
  std::istringstream in(content);
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (util::trim(line).empty()) continue;  // blank separator lines
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw Error(where + ": malformed JSON at line " + std::to_string(line_no));
    }
    if (!j.contains("text") || !j.at("text").is_string()) {
      throw Error(where + ": missing text at line " + std::to_string(line_no));
    }
    Example ex;
    ex.text = util::trim(j.at("text").get<std::string>());
    ex.id = line_no;
    if (labeled) {
      if (!j.contains("label") || !j.at("label").is_string()) {
        throw Error(where + ": missing label at line " + std::to_string(line_no));
      }
      const std::string label = j.at("label").get<std::string>();
      for (const std::string& seg : util::split(label, '/')) {
        if (seg.empty()) {
          throw Error(where + ": empty label segment at line " +
                      std::to_string(line_no));
        }
      }
      ex.label = label;
    } else if (j.contains("label")) {
      throw Error(where + ": unexpected label at line " + std::to_string(line_no));
    }
    if (ex.text.empty()) {
      ++result.skipped;
      continue;
    }
    result.examples.push_back(std::move(ex));
  }
  return result;
}

LoadResult load_dataset(const std::string& path, bool labeled) {
  return load_dataset_text(util::read_file(path), labeled, path);
}

std::string to_jsonl(const std::vector<Example>& examples) {
  std::string out;
  for (const Example& ex : examples) {
    json j;
    j["text"] = ex.text;
    if (ex.label) j["label"] = *ex.label;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_dataset(const std::string& path, const std::vector<Example>& examples) {
  util::write_file(path, to_jsonl(examples));
}

LabelIndex LabelIndex::build(const std::vector<Example>& labeled) {
  LabelIndex idx;
  for (const Example& ex : labeled) {
    if (!ex.label) throw Error("LabelIndex: unlabeled example id " +
                               std::to_string(ex.id));
    if (!idx.index_.count(*ex.label)) idx.index_[*ex.label] = 0;
  }
  if (idx.index_.size() < 2) throw Error("LabelIndex: need at least 2 classes");
  // std::map iteration is already lexicographic.
  for (auto& [label, slot] : idx.index_) {
    slot = idx.labels_.size();
    idx.labels_.push_back(label);
  }
  return idx;
}

LabelIndex LabelIndex::from_labels(std::vector<std::string> labels) {
  LabelIndex idx;
  if (labels.size() < 2) throw Error("LabelIndex: need at least 2 classes");
  idx.labels_ = std::move(labels);
  for (std::size_t i = 0; i < idx.labels_.size(); ++i) {
    if (idx.index_.count(idx.labels_[i]))
      throw Error("LabelIndex: duplicate label '" + idx.labels_[i] + "'");
    idx.index_[idx.labels_[i]] = i;
  }
  return idx;
}

std::size_t LabelIndex::index_of(const std::string& label) const {
  const auto it = index_.find(label);
  if (it == index_.end()) throw Error("LabelIndex: unknown label '" + label + "'");
  return it->second;
}

const std::string& LabelIndex::label_of(std::size_t index) const {
  if (index >= labels_.size())
    throw Error("LabelIndex: index out of range: " + std::to_string(index));
  return labels_[index];
}

std::size_t LabelIndex::max_depth() const {
  std::size_t depth = 0;
  for (const std::string& label : labels_) {
    depth = std::max(depth, util::split(label, '/').size());
  }
  return depth;
}

std::string tokenizer_mode_name(TokenizerMode mode) {
  return mode == TokenizerMode::Word ? "word" : "char";
}

TokenizerMode tokenizer_mode_from_name(const std::string& name) {
  if (name == "word") return TokenizerMode::Word;
  if (name == "char") return TokenizerMode::Char;
  throw ConfigError("tokenizer mode must be 'word' or 'char', got '" + name + "'");
}

std::vector<std::string> tokenize(const std::string& text, TokenizerMode mode) {
  std::vector<std::string> tokens;
  const auto cps = util::utf8_decode(text);
  if (mode == TokenizerMode::Char) {
    for (const char32_t cp : cps) {
      if (!util::is_unicode_space(cp)) tokens.push_back(util::utf8_encode(cp));
    }
    return tokens;
  }
  std::string current;
  for (const char32_t cp : cps) {
    if (util::is_unicode_space(cp)) {
      if (!current.empty()) tokens.push_back(util::ascii_lower(current));
      current.clear();
    } else {
      current += util::utf8_encode(cp);
    }
  }
  if (!current.empty()) tokens.push_back(util::ascii_lower(current));
  return tokens;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts,
                             TokenizerMode mode, std::size_t min_freq,
                             std::size_t max_size) {
  if (min_freq < 1) throw Error("Vocabulary: min_freq must be >= 1");
  if (max_size < 2) throw Error("Vocabulary: max_size must be >= 2");
  std::map<std::string, std::size_t> freq;
  for (const std::string& text : texts) {
    for (std::string& tok : tokenize(text, mode)) ++freq[std::move(tok)];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  kept.reserve(freq.size());
  for (auto& [tok, n] : freq) {
    if (n >= min_freq) kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.mode_ = mode;
  v.tokens_ = {"<pad>", "<unk>"};
  for (const auto& [tok, n] : kept) {
    (void)n;
    if (v.tokens_.size() >= max_size) break;
    v.tokens_.push_back(tok);
  }
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    v.ids_[v.tokens_[i]] = static_cast<int>(i);
  }
  return v;
}

int Vocabulary::id_of(const std::string& token) const {
  const auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::string Vocabulary::to_json() const {
  json j;
  j["mode"] = tokenizer_mode_name(mode_);
  // Reserved entries are implicit: the stored list starts after PAD, UNK.
  j["tokens"] = std::vector<std::string>(tokens_.begin() + 2, tokens_.end());
  return j.dump(2) + "\n";
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  jsonio::ObjectReader r(jsonio::parse(text, "vocabulary"), "vocabulary");
  Vocabulary v;
  v.mode_ = tokenizer_mode_from_name(r.require_string("mode"));
  const json* toks = r.raw("tokens");
  if (toks == nullptr || !toks->is_array()) {
    throw ConfigError("vocabulary.tokens: expected an array");
  }
  r.finish();
  v.tokens_ = {"<pad>", "<unk>"};
  for (const json& t : *toks) {
    if (!t.is_string()) throw ConfigError("vocabulary.tokens: expected strings");
    v.tokens_.push_back(t.get<std::string>());
  }
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    v.ids_[v.tokens_[i]] = static_cast<int>(i);
  }
  if (v.ids_.size() != v.tokens_.size()) {
    throw ConfigError("vocabulary.tokens: duplicate token");
  }
  return v;
}

void Vocabulary::save(const std::string& path) const {
  util::write_file(path, to_json());
}

Vocabulary Vocabulary::load(const std::string& path) {
  return from_json(util::read_file(path));
}

TokenSeq encode_tokens(std::vector<std::string> tokens, const Vocabulary& vocab,
                       std::size_t max_len) {
  if (tokens.empty()) throw Error("tokenize_encode: no tokens");
  if (max_len < 1) throw Error("tokenize_encode: max_len must be >= 1");
  TokenSeq seq;
  if (tokens.size() > max_len) {
    tokens.resize(max_len);
    seq.truncated = true;
  }
  seq.ids.reserve(tokens.size());
  for (const std::string& tok : tokens) seq.ids.push_back(vocab.id_of(tok));
  seq.tokens = std::move(tokens);
  return seq;
}

TokenSeq tokenize_encode(const std::string& text, const Vocabulary& vocab,
                         std::size_t max_len) {
  return encode_tokens(tokenize(text, vocab.mode()), vocab, max_len);
}

namespace {

// Shuffles ids deterministically and cuts into parts proportional to ratios.
std::vector<std::vector<Example>> cut_pool(const std::vector<Example>& pool,
                                           const std::vector<double>& ratios,
                                           Rng& rng, const char* pool_name) {
  double sum = 0.0;
  for (const double r : ratios) {
    if (r <= 0.0) throw Error(std::string("split_dataset: ") + pool_name +
                              " ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw Error(std::string("split_dataset: ") + pool_name +
                " ratios must sum to 1");
  }
  if (pool.size() < ratios.size()) {
    throw Error(std::string("split_dataset: ") + pool_name + " pool of " +
                std::to_string(pool.size()) + " cannot fill " +
                std::to_string(ratios.size()) + " parts");
  }
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::vector<std::vector<Example>> parts(ratios.size());
  std::size_t start = 0;
  for (std::size_t p = 0; p < ratios.size(); ++p) {
    std::size_t count =
        p + 1 == ratios.size()
            ? pool.size() - start
            : static_cast<std::size_t>(std::llround(ratios[p] * pool.size()));
    count = std::min(count, pool.size() - start);
    for (std::size_t i = 0; i < count; ++i) parts[p].push_back(pool[order[start + i]]);
    start += count;
  }
  return parts;
}

}  // namespace

DatasetSplit split_dataset(const std::vector<Example>& labeled,
                           const std::vector<Example>& unlabeled,
                           const SplitRatios& ratios, std::uint64_t seed) {
  DatasetSplit split;
  split.seed = seed;
  constexpr std::uint64_t kSplitStream = 0x5154;
  Rng rng_labeled(derive_seed(seed, kSplitStream, 0));
  Rng rng_unlabeled(derive_seed(seed, kSplitStream, 1));
  auto labeled_parts = cut_pool(
      labeled, {ratios.labeled_train, ratios.labeled_test}, rng_labeled, "labeled");
  split.train = std::move(labeled_parts[0]);
  split.test = std::move(labeled_parts[1]);
  auto unlabeled_parts =
      cut_pool(unlabeled, {ratios.unlabeled_uda, ratios.unlabeled_contrastive},
               rng_unlabeled, "unlabeled");
  split.uda_pool = std::move(unlabeled_parts[0]);
  split.contrastive_pool = std::move(unlabeled_parts[1]);
  return split;
}

}  // namespace sslc::corpus
