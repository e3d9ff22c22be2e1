#include "sslc/toy.hpp"

#include <algorithm>

#include "jsonio.hpp"
#include "sslc/rng.hpp"
#include "sslc/util.hpp"

namespace sslc::toy {

namespace {

constexpr std::uint64_t kStreamDocs = 0x61;

std::string keyword(std::size_t cls, int which) {
  return "kw" + std::to_string(cls) + (which == 0 ? "a" : "b");
}

std::string noise(std::size_t i) { return "n" + std::to_string(i); }

std::string class_label(std::size_t cls) {
  return "t" + std::to_string(cls / 2) + "/c" + std::to_string(cls);
}

std::string make_doc(std::size_t cls, const ToyConfig& cfg, Rng& rng) {
  const std::size_t len = static_cast<std::size_t>(rng.uniform_int(
      static_cast<std::int64_t>(cfg.doc_len_min),
      static_cast<std::int64_t>(cfg.doc_len_max)));
  std::vector<std::string> tokens;
  tokens.reserve(len);
  for (std::size_t i = 0; i < len; ++i) {
    if (rng.bernoulli(cfg.keyword_p)) {
      tokens.push_back(keyword(cls, static_cast<int>(rng.uniform_int(0, 1))));
    } else {
      tokens.push_back(noise(static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(cfg.noise_pool) - 1))));
    }
  }
  // Every document carries at least one keyword so the label is decidable.
  if (std::none_of(tokens.begin(), tokens.end(), [&](const std::string& t) {
        return t == keyword(cls, 0) || t == keyword(cls, 1);
      })) {
    tokens[static_cast<std::size_t>(rng.uniform_int(
        0, static_cast<std::int64_t>(tokens.size()) - 1))] =
        keyword(cls, static_cast<int>(rng.uniform_int(0, 1)));
  }
  return util::join(tokens, " ");
}

}  // namespace

void ToyConfig::validate() const {
  if (classes < 3 || classes > 10)
    throw ConfigError("toy: classes must be in [3, 10]");
  if (noise_pool < 2) throw ConfigError("toy: noise_pool must be >= 2");
  if (doc_len_min < 1 || doc_len_max < doc_len_min)
    throw ConfigError("toy: doc length range invalid");
  if (!(keyword_p > 0.0 && keyword_p < 1.0))
    throw ConfigError("toy: keyword_p must be in (0, 1)");
  if (train_per_class < 1 || test_per_class < 1)
    throw ConfigError("toy: per-class counts must be >= 1");
}

ToyCorpus make_toy_corpus(const ToyConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, kStreamDocs, 0));
  ToyCorpus out;
  std::int64_t next_id = 1;
  auto emit = [&](std::vector<corpus::Example>& dst, std::size_t cls,
                  bool labeled) {
    corpus::Example ex;
    ex.text = make_doc(cls, cfg, rng);
    if (labeled) ex.label = class_label(cls);
    ex.id = next_id++;
    dst.push_back(std::move(ex));
  };
  for (std::size_t r = 0; r < cfg.train_per_class; ++r)
    for (std::size_t cls = 0; cls < cfg.classes; ++cls)
      emit(out.train, cls, true);
  for (std::size_t r = 0; r < cfg.test_per_class; ++r)
    for (std::size_t cls = 0; cls < cfg.classes; ++cls)
      emit(out.test, cls, true);
  for (std::size_t r = 0; r < cfg.unlabeled_per_class; ++r)
    for (std::size_t cls = 0; cls < cfg.classes; ++cls)
      emit(out.unlabeled, cls, false);

  // Synonym pairs link the two keywords of each class and adjacent noise
  // tokens, so lexicon-based augmentation preserves the label.
  nlohmann::ordered_json lex = nlohmann::ordered_json::object();
  for (std::size_t cls = 0; cls < cfg.classes; ++cls) {
    lex[keyword(cls, 0)] = {keyword(cls, 1)};
    lex[keyword(cls, 1)] = {keyword(cls, 0)};
  }
  for (std::size_t i = 0; i + 1 < cfg.noise_pool; i += 2) {
    lex[noise(i)] = {noise(i + 1)};
    lex[noise(i + 1)] = {noise(i)};
  }
  out.lexicon_text = lex.dump(2) + "\n";
  return out;
}

}  // namespace sslc::toy
