#include <benchmark/benchmark.h>

#include <vector>

#include "sslc/augment.hpp"
#include "sslc/corpus.hpp"
#include "sslc/losses.hpp"
#include "sslc/model.hpp"
#include "sslc/rng.hpp"
#include "sslc/tape.hpp"
#include "sslc/toy.hpp"
#include "sslc/trainer.hpp"

using namespace sslc;

namespace {

model::ModelConfig small_config(model::Arch arch) {
  model::ModelConfig mc;
  mc.arch = arch;
  mc.vocab_size = 200;
  mc.embed_dim = 32;
  mc.hidden_dim = 64;
  mc.proj_dim = 16;
  mc.num_classes = 6;
  mc.dropout_p = 0.1;
  return mc;
}

model::Batch random_batch(std::size_t b, std::size_t l, std::size_t vocab,
                          Rng& rng) {
  model::Batch batch;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<int> seq;
    for (std::size_t j = 0; j < l; ++j)
      seq.push_back(static_cast<int>(
          rng.uniform_int(2, static_cast<std::int64_t>(vocab) - 1)));
    batch.seqs.push_back(std::move(seq));
  }
  return batch;
}

void BM_ForwardBackward(benchmark::State& state) {
  const auto arch = state.range(0) == 0 ? model::Arch::MeanPool
                                        : model::Arch::TinyAttention;
  const model::ModelConfig mc = small_config(arch);
  const model::Params params = model::Params::init(mc, 7);
  Rng rng(11);
  const model::Batch batch = random_batch(16, 24, mc.vocab_size, rng);
  std::vector<int> labels;
  for (std::size_t i = 0; i < 16; ++i)
    labels.push_back(static_cast<int>(rng.uniform_int(0, 5)));
  for (auto _ : state) {
    diff::Tape tape;
    model::TapeModel tm(tape, params);
    auto f = tm.classify(batch, model::DropoutSpec{});
    diff::Var loss = losses::ce_loss_node(tape, f.out, labels);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.gradient(f.x_input).data.data());
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(0)->Arg(1);

void BM_InfoNce(benchmark::State& state) {
  Rng rng(5);
  const std::size_t b = 24, m = static_cast<std::size_t>(state.range(0)), d = 16;
  auto unit_rows = [&](std::size_t rows) {
    Tensor t = Tensor::zeros({rows, d});
    for (auto& x : t.data) x = rng.normal();
    for (std::size_t i = 0; i < rows; ++i) {
      double n = 0.0;
      for (std::size_t j = 0; j < d; ++j) n += t.at(i, j) * t.at(i, j);
      n = std::sqrt(n);
      for (std::size_t j = 0; j < d; ++j) t.at(i, j) /= n;
    }
    return t;
  };
  const Tensor anchors = unit_rows(b), positives = unit_rows(b),
               queue = unit_rows(m);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        losses::info_nce(anchors, positives, queue, Tensor{}, 0.05));
  }
}
BENCHMARK(BM_InfoNce)->Arg(0)->Arg(160);

void BM_EditDistance(benchmark::State& state) {
  Rng rng(3);
  std::vector<std::string> a, b;
  for (int i = 0; i < 32; ++i) {
    a.push_back("tok" + std::to_string(rng.uniform_int(0, 50)));
    b.push_back("tok" + std::to_string(rng.uniform_int(0, 50)));
  }
  for (auto _ : state) benchmark::DoNotOptimize(augment::edit_distance(a, b));
}
BENCHMARK(BM_EditDistance);

void BM_PgdAttack(benchmark::State& state) {
  const model::ModelConfig mc = small_config(model::Arch::MeanPool);
  const model::Params params = model::Params::init(mc, 9);
  Rng rng(13);
  const model::Batch batch = random_batch(8, 16, mc.vocab_size, rng);
  std::vector<int> labels;
  for (std::size_t i = 0; i < 8; ++i)
    labels.push_back(static_cast<int>(rng.uniform_int(0, 5)));
  losses::AttackConfig cfg;
  cfg.method = losses::AttackMethod::Pgd;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(losses::compute_attack_delta(
        params, batch, labels, cfg, model::DropoutSpec{}, ++seed));
  }
}
BENCHMARK(BM_PgdAttack);

void BM_TrainStep(benchmark::State& state) {
  toy::ToyConfig tc;
  tc.classes = 4;
  tc.train_per_class = 8;
  tc.unlabeled_per_class = 16;
  tc.test_per_class = 2;
  const toy::ToyCorpus corpus_data = toy::make_toy_corpus(tc);
  std::vector<std::string> texts;
  for (const auto& ex : corpus_data.train) texts.push_back(ex.text);
  for (const auto& ex : corpus_data.unlabeled) texts.push_back(ex.text);
  const corpus::Vocabulary vocab =
      corpus::Vocabulary::build(texts, corpus::TokenizerMode::Word, 1, 5000);

  train::TrainConfig cfg;
  cfg.total_steps = 1u << 30;
  cfg.batch_labeled = cfg.batch_uda = cfg.batch_contrastive = 8;
  cfg.embed_dim = 32;
  cfg.hidden_dim = 64;
  cfg.proj_dim = 16;
  cfg.max_len = 16;
  cfg.queue_m = 64;
  train::TrainState st = train::init_state(
      cfg, vocab, corpus::LabelIndex::build(corpus_data.train));

  std::vector<corpus::TokenSeq> train_seqs, pool_seqs;
  std::vector<int> train_labels;
  const corpus::LabelIndex index = corpus::LabelIndex::build(corpus_data.train);
  for (const auto& ex : corpus_data.train) {
    train_seqs.push_back(corpus::tokenize_encode(ex.text, vocab, cfg.max_len));
    train_labels.push_back(static_cast<int>(index.index_of(*ex.label)));
  }
  for (const auto& ex : corpus_data.unlabeled)
    pool_seqs.push_back(corpus::tokenize_encode(ex.text, vocab, cfg.max_len));

  Rng rng(21);
  for (auto _ : state) {
    train::StepBatches b;
    for (std::size_t i = 0; i < 8; ++i) {
      const auto k = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(train_seqs.size()) - 1));
      b.labeled.seqs.push_back(train_seqs[k].ids);
      b.labels.push_back(train_labels[k]);
      const auto u = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(pool_seqs.size()) - 1));
      b.uda_clean.seqs.push_back(pool_seqs[u].ids);
      b.uda_augmented.seqs.push_back(pool_seqs[u].ids);
      auto wr = augment::word_repetition(pool_seqs[u], cfg.dup_rate, rng);
      b.con_anchor.seqs.push_back(pool_seqs[u].ids);
      b.con_view.seqs.push_back(wr.seq.ids);
    }
    benchmark::DoNotOptimize(train::train_step(st, b));
  }
}
BENCHMARK(BM_TrainStep);

}  // namespace

BENCHMARK_MAIN();
