#include "sslc/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <unistd.h>

#include "jsonio.hpp"
#include "sslc/util.hpp"

namespace sslc::augment {

using jsonio::json;

Lexicon lexicon_from_json(const std::string& text, const std::string& where) {
  const json j = jsonio::parse(text, where);
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  Lexicon lex;
  for (const auto& [token, alts] : j.items()) {
    std::vector<std::string> list;
    if (alts.is_string()) {
      list.push_back(alts.get<std::string>());
    } else if (alts.is_array()) {
      for (const json& a : alts) {
        if (!a.is_string())
          throw ConfigError(where + ": entry '" + token + "' must list strings");
        list.push_back(a.get<std::string>());
      }
    } else {
      throw ConfigError(where + ": entry '" + token +
                        "' must be a string or array of strings");
    }
    lex[token] = std::move(list);
  }
  return lex;
}

Lexicon load_lexicon(const std::string& path) {
  return lexicon_from_json(util::read_file(path), path);
}

std::size_t word_repetition_bound(std::size_t n, double dup_rate) {
  const auto formula = static_cast<std::size_t>(
      std::max(2.0, std::trunc(dup_rate * static_cast<double>(n))));
  // Cannot duplicate more distinct positions than exist.
  return std::min(formula, n);
}

WordRepetitionResult word_repetition(const corpus::TokenSeq& tokens,
                                     double dup_rate, Rng& rng) {
  const std::size_t n = tokens.tokens.size();
  if (n == 0) throw Error("word_repetition: empty sequence");
  const std::size_t bound = word_repetition_bound(n, dup_rate);
  const auto dup_len = static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(bound)));
  const std::vector<std::size_t> chosen = rng.sample_indices(n, dup_len);

  WordRepetitionResult result;
  result.dup_len = dup_len;
  result.seq.truncated = tokens.truncated;
  auto next_chosen = chosen.begin();
  for (std::size_t i = 0; i < n; ++i) {
    result.seq.tokens.push_back(tokens.tokens[i]);
    result.seq.ids.push_back(tokens.ids[i]);
    if (next_chosen != chosen.end() && *next_chosen == i) {
      result.inserted_positions.push_back(result.seq.tokens.size());
      result.seq.tokens.push_back(tokens.tokens[i]);
      result.seq.ids.push_back(tokens.ids[i]);
      ++next_chosen;
    }
  }
  return result;
}

namespace {

// Substitute source for insertions: a random in-sequence token with a lexicon
// entry, falling back to a random lexicon key.
const std::vector<std::string>* pick_insertion_entry(
    const std::vector<std::string>& tokens, const Lexicon& lexicon, Rng& rng) {
  std::vector<const std::vector<std::string>*> present;
  for (const std::string& tok : tokens) {
    const auto it = lexicon.find(tok);
    if (it != lexicon.end() && !it->second.empty()) present.push_back(&it->second);
  }
  if (!present.empty()) {
    return present[rng.next_below(present.size())];
  }
  std::vector<const std::vector<std::string>*> any;
  for (const auto& [tok, alts] : lexicon) {
    (void)tok;
    if (!alts.empty()) any.push_back(&alts);
  }
  if (any.empty()) return nullptr;
  return any[rng.next_below(any.size())];
}

}  // namespace

corpus::TokenSeq eda_transform(const corpus::TokenSeq& tokens,
                               const EdaProbs& probs, const Lexicon& lexicon,
                               const corpus::Vocabulary& vocab, Rng& rng) {
  const std::size_t n = tokens.tokens.size();
  if (n == 0) throw Error("eda_transform: empty sequence");
  for (const double p : {probs.p_insert, probs.p_delete, probs.p_replace}) {
    if (p < 0.0 || p > 1.0) throw Error("eda_transform: probability outside [0,1]");
  }
  if ((probs.p_replace > 0.0 || probs.p_insert > 0.0) && lexicon.empty()) {
    throw Error("eda_transform: lexicon required");
  }

  // Deletion, keeping at least one token.
  std::vector<std::string> work;
  if (probs.p_delete > 0.0) {
    std::vector<bool> drop(n, false);
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.bernoulli(probs.p_delete)) {
        drop[i] = true;
        ++dropped;
      }
    }
    if (dropped == n) drop[rng.next_below(n)] = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!drop[i]) work.push_back(tokens.tokens[i]);
    }
  } else {
    work = tokens.tokens;
  }

  // Insertion, one candidate slot per gap (before, between, after).
  if (probs.p_insert > 0.0) {
    std::vector<std::string> inserted;
    for (std::size_t gap = 0; gap <= work.size(); ++gap) {
      if (rng.bernoulli(probs.p_insert)) {
        if (const auto* entry = pick_insertion_entry(work, lexicon, rng)) {
          inserted.push_back((*entry)[rng.next_below(entry->size())]);
        } else {
          inserted.emplace_back();
        }
      } else {
        inserted.emplace_back();
      }
    }
    std::vector<std::string> merged;
    for (std::size_t i = 0; i <= work.size(); ++i) {
      if (!inserted[i].empty()) merged.push_back(inserted[i]);
      if (i < work.size()) merged.push_back(work[i]);
    }
    work = std::move(merged);
  }

  // Replacement through the lexicon.
  if (probs.p_replace > 0.0) {
    for (std::string& tok : work) {
      if (!rng.bernoulli(probs.p_replace)) continue;
      const auto it = lexicon.find(tok);
      if (it == lexicon.end() || it->second.empty()) continue;
      tok = it->second[rng.next_below(it->second.size())];
    }
  }

  const std::size_t out_len = std::max<std::size_t>(work.size(), 1);
  return corpus::encode_tokens(std::move(work), vocab, out_len);
}

std::map<std::string, double> build_tfidf(
    const std::vector<std::vector<std::string>>& docs) {
  std::map<std::string, std::size_t> df;
  std::map<std::string, double> tf_sum;  // sum over docs of tf/|doc|
  for (const auto& doc : docs) {
    if (doc.empty()) continue;
    std::map<std::string, std::size_t> counts;
    for (const auto& tok : doc) ++counts[tok];
    for (const auto& [tok, c] : counts) {
      ++df[tok];
      tf_sum[tok] += static_cast<double>(c) / static_cast<double>(doc.size());
    }
  }
  const double n = static_cast<double>(docs.size());
  std::map<std::string, double> scores;
  for (const auto& [tok, d] : df) {
    const double idf = std::log((1.0 + n) / (1.0 + static_cast<double>(d)));
    scores[tok] = (tf_sum[tok] / static_cast<double>(d)) * idf;
  }
  return scores;
}

TfidfReplaceResult tfidf_replace(const corpus::TokenSeq& tokens,
                                 const std::map<std::string, double>& tfidf,
                                 double p, const corpus::Vocabulary& vocab,
                                 Rng& rng) {
  if (p < 0.0 || p > 1.0) throw Error("tfidf_replace: p outside [0,1]");
  const std::size_t n = tokens.tokens.size();
  TfidfReplaceResult result;
  result.seq = tokens;
  const auto k = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-9)));
  if (k == 0) return result;

  // Low-score pool: table entries at or below the lower-median score.
  std::vector<std::pair<double, std::string>> entries;
  for (const auto& [tok, score] : tfidf) entries.emplace_back(score, tok);
  if (entries.empty()) {
    result.empty_pool = true;
    return result;
  }
  std::sort(entries.begin(), entries.end());
  const double median = entries[(entries.size() - 1) / 2].first;
  std::vector<std::string> pool;
  for (const auto& [score, tok] : entries) {
    if (score <= median) pool.push_back(tok);
  }

  // Lowest-scoring positions first, ties broken by position.
  std::vector<std::pair<double, std::size_t>> scored(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = tfidf.find(tokens.tokens[i]);
    scored[i] = {it == tfidf.end() ? 0.0 : it->second, i};
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t pos = scored[r].second;
    const std::string& substitute = pool[rng.next_below(pool.size())];
    result.seq.tokens[pos] = substitute;
    result.seq.ids[pos] = vocab.id_of(substitute);
  }
  return result;
}

BackTranslator BackTranslator::lexicon_roundtrip(Lexicon lexicon) {
  BackTranslator bt;
  bt.kind_ = Kind::Lexicon;
  bt.lexicon_ = std::move(lexicon);
  return bt;
}

BackTranslator BackTranslator::identity() { return BackTranslator(); }

BackTranslator BackTranslator::external(std::string command) {
  BackTranslator bt;
  bt.kind_ = Kind::External;
  bt.command_ = std::move(command);
  return bt;
}

namespace {

std::string run_external(const std::string& command, const std::string& text) {
  char path[] = "/tmp/sslc_bt_XXXXXX";
  const int fd = ::mkstemp(path);
  if (fd < 0) throw Error("back_translate: cannot create temp file");
  const ssize_t written = ::write(fd, text.data(), text.size());
  ::close(fd);
  if (written != static_cast<ssize_t>(text.size())) {
    ::unlink(path);
    throw Error("back_translate: temp write failed");
  }
  const std::string full = command + " < " + path;
  FILE* pipe = ::popen(full.c_str(), "r");
  if (pipe == nullptr) {
    ::unlink(path);
    throw Error("back_translate: cannot spawn provider");
  }
  std::string out;
  std::array<char, 4096> buf;
  std::size_t got;
  while ((got = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) {
    out.append(buf.data(), got);
  }
  const int status = ::pclose(pipe);
  ::unlink(path);
  if (status != 0) {
    throw Error("back_translate: provider exited with status " +
                std::to_string(status));
  }
  return out;
}

}  // namespace

std::string BackTranslator::translate(const std::string& text) const {
  if (text.empty()) return text;
  std::string out;
  switch (kind_) {
    case Kind::Identity:
      return text;
    case Kind::Lexicon: {
      std::vector<std::string> parts;
      for (const std::string& tok : util::split(text, ' ')) {
        const auto it = lexicon_.find(tok);
        if (it != lexicon_.end() && !it->second.empty()) {
          parts.push_back(it->second.front());
        } else {
          parts.push_back(tok);
        }
      }
      out = util::join(parts, " ");
      break;
    }
    case Kind::External:
      out = util::trim(run_external(command_, text));
      break;
  }
  if (out.empty()) {
    ++fallbacks_;
    return text;
  }
  return out;
}

std::size_t edit_distance(const std::vector<std::string>& a,
                          const std::vector<std::string>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double edit_similarity(const std::vector<std::string>& a,
                       const std::vector<std::string>& b) {
  const std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 1.0;
  return 1.0 - static_cast<double>(edit_distance(a, b)) /
                   static_cast<double>(longest);
}

ContrastiveBatch build_contrastive_batch(
    const std::vector<corpus::TokenSeq>& texts, const AugConfig& cfg,
    const Lexicon& lexicon, const corpus::Vocabulary& vocab, Rng& rng) {
  if (texts.empty()) throw Error("build_contrastive_batch: empty batch");
  const bool negatives_enabled =
      cfg.neg_sim_threshold > 0.0 &&
      (cfg.eda.p_insert > 0.0 || cfg.eda.p_delete > 0.0 || cfg.eda.p_replace > 0.0);

  ContrastiveBatch batch;
  for (const corpus::TokenSeq& anchor : texts) {
    WordRepetitionResult rep = word_repetition(anchor, cfg.dup_rate, rng);
    ContrastivePair pos;
    pos.anchor = anchor;
    pos.view = std::move(rep.seq);
    pos.polarity = Polarity::Positive;
    pos.pseudo_label = static_cast<int>(
        std::llround(edit_similarity(pos.anchor.tokens, pos.view.tokens) * 10.0));
    batch.pairs.push_back(std::move(pos));

    if (!negatives_enabled) continue;
    bool emitted = false;
    for (int attempt = 0; attempt < 5 && !emitted; ++attempt) {
      corpus::TokenSeq view = eda_transform(anchor, cfg.eda, lexicon, vocab, rng);
      const double s = edit_similarity(anchor.tokens, view.tokens);
      if (s >= cfg.neg_sim_threshold) continue;
      ContrastivePair neg;
      neg.anchor = anchor;
      neg.view = std::move(view);
      neg.polarity = Polarity::Negative;
      neg.pseudo_label = static_cast<int>(std::llround(s * 10.0));
      batch.pairs.push_back(std::move(neg));
      emitted = true;
    }
    if (!emitted) ++batch.rejected_negatives;
  }
  return batch;
}

}  // namespace sslc::augment
