#include <set>

#include "doctest.h"
#include "sslc/corpus.hpp"
#include "sslc/util.hpp"

using namespace sslc;
using corpus::Example;

namespace {

std::vector<Example> labeled_examples(
    const std::vector<std::pair<std::string, std::string>>& rows) {
  std::vector<Example> out;
  std::int64_t id = 1;
  for (const auto& [text, label] : rows) {
    Example ex;
    ex.text = text;
    ex.label = label;
    ex.id = id++;
    out.push_back(ex);
  }
  return out;
}

}  // namespace

TEST_CASE("load_dataset_text parses records and keeps line ids") {
  const std::string content =
      "{\"text\": \"hello world\", \"label\": \"a\"}\n"
      "\n"
      "{\"text\": \"  \", \"label\": \"a\"}\n"
      "{\"text\": \"second\", \"label\": \"b/c\"}\n";
  const auto r = corpus::load_dataset_text(content, true, "mem");
  REQUIRE(r.examples.size() == 2);
  CHECK(r.skipped == 1);
  CHECK(r.examples[0].text == "hello world");
  CHECK(r.examples[0].id == 1);
  CHECK(r.examples[1].id == 4);
  CHECK(*r.examples[1].label == "b/c");
}

TEST_CASE("load_dataset_text rejects malformed lines with line numbers") {
  CHECK_THROWS_WITH(corpus::load_dataset_text("{\"text\": \"x\"}\nnot json\n",
                                              false, "mem"),
                    "mem: malformed JSON at line 2");
  CHECK_THROWS_WITH(corpus::load_dataset_text("{\"label\": \"a\"}\n", true, "mem"),
                    "mem: missing text at line 1");
  CHECK_THROWS_WITH(corpus::load_dataset_text("{\"text\": \"x\"}\n", true, "mem"),
                    "mem: missing label at line 1");
  CHECK_THROWS_WITH(corpus::load_dataset_text(
                        "{\"text\": \"x\", \"label\": \"a\"}\n", false, "mem"),
                    "mem: unexpected label at line 1");
  CHECK_THROWS_WITH(corpus::load_dataset_text(
                        "{\"text\": \"x\", \"label\": \"a//b\"}\n", true, "mem"),
                    "mem: empty label segment at line 1");
}

TEST_CASE("jsonl round trip") {
  const auto examples = labeled_examples({{"one two", "a"}, {"three", "b"}});
  const std::string jsonl = corpus::to_jsonl(examples);
  const auto back = corpus::load_dataset_text(jsonl, true, "mem");
  REQUIRE(back.examples.size() == 2);
  CHECK(back.examples[0].text == "one two");
  CHECK(*back.examples[1].label == "b");
}

TEST_CASE("label index is lexicographic and validates") {
  const auto examples =
      labeled_examples({{"x", "b"}, {"y", "a/z"}, {"z", "a/z"}, {"w", "a/b"}});
  const corpus::LabelIndex idx = corpus::LabelIndex::build(examples);
  REQUIRE(idx.num_classes() == 3);
  CHECK(idx.label_of(0) == "a/b");
  CHECK(idx.label_of(1) == "a/z");
  CHECK(idx.label_of(2) == "b");
  CHECK(idx.index_of("b") == 2);
  CHECK(idx.max_depth() == 2);
  CHECK_THROWS(idx.index_of("missing"));
  CHECK_THROWS(corpus::LabelIndex::build(labeled_examples({{"x", "only"}})));
}

TEST_CASE("label index rebuild preserves order and rejects duplicates") {
  const corpus::LabelIndex idx = corpus::LabelIndex::from_labels({"z", "a"});
  CHECK(idx.label_of(0) == "z");
  CHECK(idx.index_of("a") == 1);
  CHECK_THROWS(corpus::LabelIndex::from_labels({"a", "a"}));
  CHECK_THROWS(corpus::LabelIndex::from_labels({"a"}));
}

TEST_CASE("word tokenizer lowercases and splits on unicode spaces") {
  const auto toks =
      corpus::tokenize("Hello WORLD  again", corpus::TokenizerMode::Word);
  CHECK(toks == std::vector<std::string>{"hello", "world", "again"});
}

TEST_CASE("char tokenizer emits one token per non-space codepoint") {
  const auto toks = corpus::tokenize("ab 文字", corpus::TokenizerMode::Char);
  CHECK(toks == std::vector<std::string>{"a", "b", "文", "字"});
}

TEST_CASE("vocabulary orders by frequency then token, with caps") {
  const std::vector<std::string> texts{"b b b a a c", "a c"};
  const corpus::Vocabulary v =
      corpus::Vocabulary::build(texts, corpus::TokenizerMode::Word, 1, 100);
  REQUIRE(v.size() == 5);
  CHECK(v.token_of(0) == "<pad>");
  CHECK(v.token_of(1) == "<unk>");
  CHECK(v.token_of(2) == "a");  // freq 3, ties with b broken by token order
  CHECK(v.token_of(3) == "b");
  CHECK(v.token_of(4) == "c");
  CHECK(v.id_of("zzz") == corpus::Vocabulary::kUnk);

  const corpus::Vocabulary capped =
      corpus::Vocabulary::build(texts, corpus::TokenizerMode::Word, 1, 3);
  CHECK(capped.size() == 3);
  const corpus::Vocabulary min2 =
      corpus::Vocabulary::build(texts, corpus::TokenizerMode::Word, 3, 100);
  CHECK(min2.size() == 4);  // only a and b reach freq 3? a=3,b=3
}

TEST_CASE("vocabulary json round trip") {
  const corpus::Vocabulary v = corpus::Vocabulary::build(
      {"alpha beta beta"}, corpus::TokenizerMode::Word, 1, 100);
  const corpus::Vocabulary back = corpus::Vocabulary::from_json(v.to_json());
  CHECK(back.size() == v.size());
  CHECK(back.mode() == v.mode());
  CHECK(back.tokens() == v.tokens());
  CHECK(util::fnv1a_hex(back.to_json()) == util::fnv1a_hex(v.to_json()));
}

TEST_CASE("tokenize_encode truncates and maps unknowns") {
  const corpus::Vocabulary v = corpus::Vocabulary::build(
      {"a b c"}, corpus::TokenizerMode::Word, 1, 100);
  const corpus::TokenSeq s = corpus::tokenize_encode("a b zzz a", v, 3);
  CHECK(s.truncated);
  REQUIRE(s.ids.size() == 3);
  CHECK(s.ids[2] == corpus::Vocabulary::kUnk);
  CHECK_FALSE(corpus::tokenize_encode("a", v, 3).truncated);
  CHECK_THROWS_WITH(corpus::tokenize_encode("   ", v, 3),
                    "tokenize_encode: no tokens");
}

TEST_CASE("split_dataset is disjoint, covering and deterministic") {
  std::vector<Example> labeled, unlabeled;
  for (int i = 0; i < 50; ++i) {
    Example ex;
    ex.text = "text " + std::to_string(i);
    ex.label = i % 2 ? "a" : "b";
    ex.id = i + 1;
    labeled.push_back(ex);
  }
  for (int i = 0; i < 40; ++i) {
    Example ex;
    ex.text = "pool " + std::to_string(i);
    ex.id = i + 1;
    unlabeled.push_back(ex);
  }
  const corpus::SplitRatios ratios;
  const auto s1 = corpus::split_dataset(labeled, unlabeled, ratios, 7);
  const auto s2 = corpus::split_dataset(labeled, unlabeled, ratios, 7);
  CHECK(s1.train.size() + s1.test.size() == labeled.size());
  CHECK(s1.uda_pool.size() + s1.contrastive_pool.size() == unlabeled.size());
  CHECK(s1.train.size() == 40);
  CHECK(s1.uda_pool.size() == 20);

  std::set<std::int64_t> seen;
  for (const auto& ex : s1.train) seen.insert(ex.id);
  for (const auto& ex : s1.test) CHECK(seen.insert(ex.id).second);

  CHECK(s1.train == s2.train);
  CHECK(s1.uda_pool == s2.uda_pool);
  const auto s3 = corpus::split_dataset(labeled, unlabeled, ratios, 8);
  CHECK(s1.train != s3.train);

  corpus::SplitRatios bad;
  bad.labeled_train = 0.5;
  bad.labeled_test = 0.6;
  CHECK_THROWS(corpus::split_dataset(labeled, unlabeled, bad, 7));
}
