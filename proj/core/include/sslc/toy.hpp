#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sslc/corpus.hpp"

namespace sslc::toy {

// Synthetic keyword corpus: each class is defined by two keyword tokens
// mixed into noise tokens drawn from a shared pool. Labels are two-level
// paths "t<group>/c<class>" with two classes per group.
struct ToyConfig {
  std::size_t classes = 6;  // leaf classes, 3..10
  std::size_t noise_pool = 40;
  std::size_t train_per_class = 20;
  std::size_t unlabeled_per_class = 60;
  std::size_t test_per_class = 40;
  std::size_t doc_len_min = 6;
  std::size_t doc_len_max = 12;
  double keyword_p = 0.35;  // per-token chance of a class keyword
  std::uint64_t seed = 1;

  void validate() const;
};

struct ToyCorpus {
  std::vector<corpus::Example> train;      // labeled
  std::vector<corpus::Example> test;       // labeled
  std::vector<corpus::Example> unlabeled;  // class hint dropped
  std::string lexicon_text;  // json synonym map keeping labels stable
};

ToyCorpus make_toy_corpus(const ToyConfig& cfg);

}  // namespace sslc::toy
