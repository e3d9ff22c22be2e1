#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "sslc/corpus.hpp"
#include "sslc/losses.hpp"
#include "sslc/model.hpp"
#include "sslc/rng.hpp"
#include "sslc/tensor.hpp"
#include "sslc/toy.hpp"
#include "sslc/trainer.hpp"
#include "sslc/util.hpp"

using namespace sslc;
using train::NegativeQueue;
using train::Optimizer;
using train::OptimizerConfig;
using train::OptKind;
using train::PoolCycler;
using train::PoolPosition;
using train::StepBatches;
using train::TrainConfig;
using train::TrainState;

namespace {

Tensor tagged_rows(std::vector<double> tags, std::size_t width = 2) {
  Tensor t = Tensor::zeros({tags.size(), width});
  for (std::size_t i = 0; i < tags.size(); ++i) {
    for (std::size_t j = 0; j < width; ++j) t.at(i, j) = tags[i];
  }
  return t;
}

std::vector<double> first_column(const Tensor& t) {
  std::vector<double> out;
  for (std::size_t i = 0; i < t.shape[0]; ++i) out.push_back(t.at(i, 0));
  return out;
}

// Small two-class world shared by the step-level tests.
struct StepFixture {
  corpus::Vocabulary vocab;
  corpus::LabelIndex labels;
  TrainConfig config;

  static StepFixture make() {
    StepFixture f;
    f.vocab = corpus::Vocabulary::build(
        {"aa bb cc dd ee ff gg hh", "ii jj kk ll"},
        corpus::TokenizerMode::Word, 1, 100);
    const corpus::Example e1{"aa bb", std::string("pos"), 1};
    const corpus::Example e2{"cc dd", std::string("neg"), 2};
    const std::vector<corpus::Example> labeled{e1, e2};
    f.labels = corpus::LabelIndex::build(labeled);
    f.config.seed = 11;
    f.config.total_steps = 4;
    f.config.embed_dim = 6;
    f.config.hidden_dim = 8;
    f.config.proj_dim = 4;
    f.config.dropout_p = 0.1;
    f.config.queue_m = 8;
    f.config.tau = 0.1;
    f.config.gamma = 0.9;
    f.config.batch_labeled = 3;
    f.config.batch_uda = 2;
    f.config.batch_contrastive = 2;
    f.config.attack.method = losses::AttackMethod::Fgm;
    f.config.attack.epsilon = 1e-2;
    f.config.uda.confidence_beta = 0.0;
    return f;
  }

  TrainState state() const { return train::init_state(config, vocab, labels); }

  model::Batch batch(std::vector<std::vector<int>> seqs) const {
    model::Batch b;
    b.seqs = std::move(seqs);
    return b;
  }

  StepBatches batches() const {
    StepBatches b;
    b.labeled = batch({{2, 3}, {4, 5}, {6, 7}});
    b.labels = {0, 1, 0};
    b.uda_clean = batch({{8, 9}, {2, 4}});
    b.uda_augmented = batch({{8, 9, 9}, {2, 4}});
    b.con_anchor = batch({{3, 5, 7}, {2, 6}});
    b.con_view = batch({{3, 3, 5, 7}, {2, 6, 6}});
    return b;
  }
};

}  // namespace

TEST_CASE("negative queue is a fifo with eviction") {
  SUBCASE("capacity four") {
    NegativeQueue q(4, 2);
    CHECK(q.size() == 0);
    CHECK(q.push(tagged_rows({1, 2})) == 0);
    CHECK(q.size() == 2);
    CHECK(q.push(tagged_rows({3, 4})) == 0);
    CHECK(first_column(q.contents()) == std::vector<double>{1, 2, 3, 4});
    // Fifth and sixth entries evict the two oldest.
    CHECK(q.push(tagged_rows({5, 6})) == 2);
    CHECK(q.size() == 4);
    CHECK(first_column(q.contents()) == std::vector<double>{3, 4, 5, 6});
    CHECK(q.pushed_total() == 6);
  }
  SUBCASE("capacity one") {
    NegativeQueue q(1, 2);
    q.push(tagged_rows({1, 2, 3}));
    CHECK(q.size() == 1);
    CHECK(first_column(q.contents()) == std::vector<double>{3});
  }
  SUBCASE("capacity zero swallows everything") {
    NegativeQueue q(0, 2);
    CHECK(q.push(tagged_rows({1, 2, 3})) == 3);
    CHECK(q.size() == 0);
    CHECK(q.contents().shape == std::vector<std::size_t>{0, 2});
  }
  SUBCASE("size is min of capacity and pushed") {
    for (const std::size_t m : {0ul, 1ul, 4ul, 160ul}) {
      NegativeQueue q(m, 2);
      std::size_t pushed = 0;
      for (int round = 0; round < 9; ++round) {
        q.push(tagged_rows({1.0 * round, 2.0 * round, 3.0 * round}));
        pushed += 3;
        CHECK(q.size() == std::min(m, pushed));
      }
    }
  }
  SUBCASE("width mismatch throws") {
    NegativeQueue q(4, 2);
    CHECK_THROWS_WITH_AS(q.push(Tensor::zeros({1, 3})),
                         "queue_push: width mismatch", Error);
  }
}

TEST_CASE("adam step matches a hand computation") {
  model::ModelConfig mc;
  mc.vocab_size = 2;
  mc.embed_dim = 1;
  mc.hidden_dim = 1;
  mc.proj_dim = 1;
  mc.num_classes = 2;
  model::Params p = model::Params::init(mc, 1);
  // Single tracked coordinate: start from a known value.
  for (auto& [name, t] : p.tensors)
    for (double& x : t.data) x = 0.1;

  OptimizerConfig cfg;
  cfg.kind = OptKind::Adam;
  cfg.lr = 0.01;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.999;
  cfg.eps = 1e-8;
  Optimizer opt(cfg, p);

  std::map<std::string, Tensor> grads;
  for (const auto& [name, t] : p.tensors) {
    Tensor g = Tensor::zeros(t.shape);
    for (double& x : g.data) x = 0.5;
    grads[name] = g;
  }
  opt.step(p, grads);
  // t=1: m=0.05, v=0.00025, mhat=0.5, vhat=0.25,
  // update = lr * 0.5/(0.5+1e-8).
  const double expect1 = 0.1 - 0.01 * (0.5 / (0.5 + 1e-8));
  CHECK(p.at("embed").data[0] == doctest::Approx(expect1).epsilon(1e-15));
  CHECK(opt.steps_taken() == 1);

  opt.step(p, grads);
  // t=2 with the same gradient keeps mhat=0.5, vhat=0.25.
  const double expect2 = expect1 - 0.01 * (0.5 / (0.5 + 1e-8));
  CHECK(p.at("embed").data[0] == doctest::Approx(expect2).epsilon(1e-14));
  CHECK(p.version == 2);
}

TEST_CASE("adam decoupled weight decay and sgd") {
  model::ModelConfig mc;
  mc.vocab_size = 2;
  mc.embed_dim = 1;
  mc.hidden_dim = 1;
  mc.proj_dim = 1;
  mc.num_classes = 2;

  SUBCASE("sgd with weight decay") {
    model::Params p = model::Params::init(mc, 1);
    for (auto& [name, t] : p.tensors)
      for (double& x : t.data) x = 1.0;
    OptimizerConfig cfg;
    cfg.kind = OptKind::Sgd;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    Optimizer opt(cfg, p);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, t] : p.tensors) {
      Tensor g = Tensor::zeros(t.shape);
      for (double& x : g.data) x = 2.0;
      grads[name] = g;
    }
    opt.step(p, grads);
    // theta -= lr * (g + wd*theta) = 1 - 0.1*(2 + 0.5) = 0.75.
    CHECK(p.at("embed").data[0] == doctest::Approx(0.75).epsilon(1e-15));
  }
  SUBCASE("missing gradient throws") {
    model::Params p = model::Params::init(mc, 1);
    Optimizer opt(OptimizerConfig{}, p);
    CHECK_THROWS_WITH_AS(opt.step(p, {}), "optimizer: missing gradient cls_b",
                         Error);
  }
  SUBCASE("restore replays moments") {
    model::Params p = model::Params::init(mc, 1);
    Optimizer a(OptimizerConfig{}, p);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, t] : p.tensors) {
      Tensor g = Tensor::zeros(t.shape);
      for (double& x : g.data) x = 0.3;
      grads[name] = g;
    }
    model::Params pa = p;
    a.step(pa, grads);
    a.step(pa, grads);

    // Replay: one step, capture, restore into a fresh optimizer, second step.
    model::Params pb = p;
    Optimizer b1(OptimizerConfig{}, p);
    b1.step(pb, grads);
    Optimizer b2(OptimizerConfig{}, p);
    b2.restore(b1.steps_taken(), b1.first_moments(), b1.second_moments());
    b2.step(pb, grads);
    for (const auto& [name, t] : pa.tensors) {
      CHECK(t.data == pb.tensors.at(name).data);
    }
  }
}

TEST_CASE("train config json round trip and defaults") {
  SUBCASE("empty object gives defaults") {
    const TrainConfig cfg = TrainConfig::from_json("{}", "config");
    CHECK(cfg.seed == 1);
    CHECK(cfg.total_steps == 100);
    CHECK(cfg.lambda_unsup == 1.0);
    CHECK(cfg.omega_joint == 0.5);
    CHECK(cfg.tau == 0.05);
    CHECK(cfg.gamma == 0.995);
    CHECK(cfg.queue_m == 160);
    CHECK(cfg.dup_rate == 0.32);
    CHECK(cfg.uda.confidence_beta == 0.8);
    CHECK(cfg.attack.method == losses::AttackMethod::Fgm);
    CHECK(cfg.attack.epsilon == 1e-2);
    CHECK(cfg.attack.eta == doctest::Approx(1e-2 / 3.0).epsilon(1e-15));
    CHECK(cfg.attack.k_steps == 3);
    CHECK(cfg.batch_labeled == 24);
    CHECK(cfg.max_len == 128);
    CHECK(cfg.optimizer.kind == OptKind::Adam);
    CHECK(cfg.optimizer.lr == 1e-3);
    CHECK(cfg.embed_dim == 64);
    CHECK(cfg.hidden_dim == 128);
    CHECK(cfg.proj_dim == 32);
    CHECK(cfg.dropout_p == 0.1);
  }
  SUBCASE("attack eta and sigma2 default from epsilon") {
    const TrainConfig cfg = TrainConfig::from_json(
        R"({"attack": {"method": "pgd", "eps": 0.03}})", "config");
    CHECK(cfg.attack.eta == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(cfg.attack.sigma2 == doctest::Approx(9e-6).epsilon(1e-12));
  }
  SUBCASE("unknown keys are rejected with their path") {
    CHECK_THROWS_WITH_AS(TrainConfig::from_json(R"({"bogus": 1})", "config"),
                         "unknown key: bogus", ConfigError);
    CHECK_THROWS_WITH_AS(
        TrainConfig::from_json(R"({"attack": {"power": 9}})", "config"),
        "unknown key: attack.power", ConfigError);
  }
  SUBCASE("validation failures carry plain messages") {
    TrainConfig cfg;
    cfg.gamma = 1.0;
    CHECK_THROWS_WITH_AS(cfg.validate(), "gamma must be in [0, 1)",
                         ConfigError);
    cfg = TrainConfig{};
    cfg.omega_joint = 1.5;
    CHECK_THROWS_WITH_AS(cfg.validate(), "omega must be in [0, 1]",
                         ConfigError);
    cfg = TrainConfig{};
    cfg.batch_labeled = 0;
    CHECK_THROWS_WITH_AS(cfg.validate(), "batch_labeled must be >= 1",
                         ConfigError);
  }
  SUBCASE("serialized form parses back to the same config") {
    TrainConfig cfg;
    cfg.seed = 77;
    cfg.total_steps = 12;
    cfg.alternate = true;
    cfg.tsa = losses::TsaSchedule::Linear;
    cfg.attack.method = losses::AttackMethod::Pgd;
    cfg.attack.epsilon = 0.02;
    cfg.uda_augment.kind = train::UdaAugmentKind::Eda;
    cfg.neg_sim_threshold = 0.4;
    cfg.lexicon_path = "lex.json";
    cfg.optimizer.kind = OptKind::Sgd;
    cfg.arch = model::Arch::TinyAttention;
    const TrainConfig back =
        TrainConfig::from_json(cfg.to_json(), "config");
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.seed == 77);
    CHECK(back.alternate);
    CHECK(back.tsa == losses::TsaSchedule::Linear);
    CHECK(back.attack.method == losses::AttackMethod::Pgd);
    CHECK(back.uda_augment.kind == train::UdaAugmentKind::Eda);
    CHECK(back.lexicon_path == std::optional<std::string>("lex.json"));
    CHECK(back.optimizer.kind == OptKind::Sgd);
    CHECK(back.arch == model::Arch::TinyAttention);
  }
}

TEST_CASE("pool cycler is a resumable epoch shuffler") {
  SUBCASE("each epoch is a permutation") {
    PoolCycler c(5, 9, 0x21);
    const std::vector<std::size_t> epoch = c.take(5);
    std::vector<std::size_t> sorted = epoch;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3, 4});
  }
  SUBCASE("take spans epoch boundaries") {
    PoolCycler c(3, 9, 0x21);
    const auto nine = c.take(9);
    CHECK(nine.size() == 9);
    // The epoch advances lazily: a fully consumed epoch is reported as
    // (epoch, cursor == pool size) until the next draw.
    CHECK(c.position().epoch == 2);
    CHECK(c.position().cursor == 3);
    // Every index appears exactly three times.
    std::vector<int> counts(3, 0);
    for (std::size_t i : nine) ++counts.at(i);
    CHECK(counts == std::vector<int>{3, 3, 3});
  }
  SUBCASE("position restores the stream exactly") {
    PoolCycler a(7, 42, 0x22);
    a.take(4);
    const PoolPosition mid = a.position();
    const auto rest_a = a.take(10);
    PoolCycler b(7, 42, 0x22, mid);
    const auto rest_b = b.take(10);
    CHECK(rest_a == rest_b);
  }
  SUBCASE("different tags give different orders") {
    PoolCycler a(20, 42, 0x21);
    PoolCycler b(20, 42, 0x22);
    CHECK(a.take(20) != b.take(20));
  }
  SUBCASE("empty pool cannot be drawn from") {
    PoolCycler c(0, 1, 0x21);
    CHECK_THROWS_WITH_AS(c.take(1), "pool is empty", Error);
  }
}

TEST_CASE("history rows serialize in a fixed field order") {
  train::HistoryRow row;
  row.step = 7;
  row.losses.l_sup = 1.5;
  row.losses.l_unsup = 0.25;
  row.losses.l_adv = 1.625;
  row.losses.l_con = 2.0;
  row.losses.l_total = 3.4375;
  row.losses.masked_consistency = 3;
  const std::string plain = train::history_row_json(row);
  CHECK(plain.find("\"step\":7") != std::string::npos);
  CHECK(plain.find("\"l_sup\":1.5") != std::string::npos);
  CHECK(plain.find("eval_accuracy") == std::string::npos);
  CHECK(plain.find("\"step\"") < plain.find("\"l_sup\""));
  CHECK(plain.find("\"l_sup\"") < plain.find("\"l_total\""));

  row.eval_accuracy = 0.75;
  row.eval_micro_f1 = 0.75;
  const std::string with_eval = train::history_row_json(row);
  CHECK(with_eval.find("\"eval_accuracy\":0.75") != std::string::npos);
  CHECK(with_eval.find("\"eval_micro_f1\":0.75") != std::string::npos);
}

TEST_CASE("train_step collapse cases and identities") {
  const StepFixture f = StepFixture::make();

  SUBCASE("omega one ignores the contrastive branch") {
    TrainConfig cfg = f.config;
    cfg.omega_joint = 1.0;
    TrainState st = train::init_state(cfg, f.vocab, f.labels);
    const auto out = train::train_step(st, f.batches());
    CHECK(out.l_total == out.l_uda);
    CHECK(out.l_con == 0.0);
    CHECK(st.queue.size() == 0);  // nothing pushed
  }
  SUBCASE("all side branches off collapses to the supervised loss") {
    TrainConfig cfg = f.config;
    cfg.omega_joint = 1.0;
    cfg.lambda_unsup = 0.0;
    cfg.alpha_adv = 0.0;
    TrainState st = train::init_state(cfg, f.vocab, f.labels);
    StepBatches b = f.batches();
    b.uda_clean = {};
    b.uda_augmented = {};
    b.con_anchor = {};
    b.con_view = {};
    const auto out = train::train_step(st, b);
    CHECK(out.l_total == out.l_sup);
    CHECK(out.l_unsup == 0.0);
    CHECK(out.l_adv == 0.0);
  }
  SUBCASE("omega zero trains on the contrastive loss alone") {
    TrainConfig cfg = f.config;
    cfg.omega_joint = 0.0;
    TrainState st = train::init_state(cfg, f.vocab, f.labels);
    StepBatches b;
    b.con_anchor = f.batches().con_anchor;
    b.con_view = f.batches().con_view;
    const auto out = train::train_step(st, b);
    CHECK(out.l_total == out.l_con);
    CHECK(out.l_sup == 0.0);
    CHECK(out.l_adv == 0.0);
  }
  SUBCASE("weighting identities hold to 1e-12") {
    TrainConfig cfg = f.config;
    cfg.omega_joint = 0.6;
    cfg.lambda_unsup = 0.7;
    cfg.alpha_adv = 0.3;
    TrainState st = train::init_state(cfg, f.vocab, f.labels);
    const auto out = train::train_step(st, f.batches());
    CHECK(std::abs(out.l_uda - (out.l_sup + 0.7 * out.l_unsup +
                                0.3 * out.l_adv)) < 1e-12);
    CHECK(std::abs(out.l_total - (0.6 * out.l_uda + 0.4 * out.l_con)) < 1e-12);
    CHECK(out.l_sup > 0.0);
    CHECK(out.l_adv >= out.l_sup - 1e-9);  // ascent direction cannot help
    CHECK(out.l_con > 0.0);
  }
}

TEST_CASE("branch values are independent of the contrastive branch") {
  const StepFixture f = StepFixture::make();
  TrainConfig joint = f.config;
  joint.omega_joint = 0.5;
  TrainConfig sup_only = f.config;
  sup_only.omega_joint = 1.0;
  TrainState a = train::init_state(joint, f.vocab, f.labels);
  TrainState b = train::init_state(sup_only, f.vocab, f.labels);
  const auto ra = train::train_step(a, f.batches());
  const auto rb = train::train_step(b, f.batches());
  // Identical seeds and batches: the joint run's supervised-side losses are
  // bitwise equal to the supervised-only run's.
  CHECK(ra.l_sup == rb.l_sup);
  CHECK(ra.l_unsup == rb.l_unsup);
  CHECK(ra.l_adv == rb.l_adv);
}

TEST_CASE("first-step contrastive loss sees an empty queue") {
  const StepFixture f = StepFixture::make();
  TrainState st = f.state();
  const model::Params before = st.theta;
  const StepBatches b = f.batches();
  const auto out = train::train_step(st, b);

  // Reconstruct the two student views with the derived per-step seeds.
  const model::DropoutSpec anchor_drop{true, derive_seed(f.config.seed, 0x37, 1)};
  const model::DropoutSpec view_drop{true, derive_seed(f.config.seed, 0x38, 1)};
  auto [anchors, t1] = model::forward_embed(before, b.con_anchor, anchor_drop);
  auto [views, t2] = model::forward_embed(before, b.con_view, view_drop);
  const Tensor empty_queue = Tensor::zeros({0, 4});
  const Tensor no_extras = Tensor::zeros({0, 4});
  const double expect =
      losses::info_nce(anchors, views, empty_queue, no_extras, f.config.tau);
  CHECK(out.l_con == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("queue entries come from the post-update momentum encoder") {
  const StepFixture f = StepFixture::make();
  TrainState st = f.state();
  const StepBatches b = f.batches();
  train::train_step(st, b);
  REQUIRE(st.queue.size() == b.con_view.size());
  auto [expect, trace] =
      model::forward_embed(st.momentum, b.con_view, model::DropoutSpec{});
  const Tensor got = st.queue.contents();
  REQUIRE(got.shape == expect.shape);
  CHECK(got.data == expect.data);
}

TEST_CASE("momentum tracks theta as a convex combination") {
  const StepFixture f = StepFixture::make();
  TrainState st = f.state();
  const model::Params m0 = st.momentum;
  train::train_step(st, f.batches());
  const Tensor& updated = st.momentum.at("ff1_w");
  const Tensor& old = m0.at("ff1_w");
  const Tensor& theta = st.theta.at("ff1_w");
  for (std::size_t i = 0; i < updated.data.size(); ++i) {
    CHECK(updated.data[i] ==
          doctest::Approx(0.9 * old.data[i] + 0.1 * theta.data[i])
              .epsilon(1e-12));
  }
}

TEST_CASE("teacher refresh follows its cadence") {
  const StepFixture f = StepFixture::make();
  TrainConfig cfg = f.config;
  cfg.teacher_refresh_every = 2;
  TrainState st = train::init_state(cfg, f.vocab, f.labels);
  const model::Params theta0 = st.theta;
  train::train_step(st, f.batches());
  // Step 1: not refreshed, the teacher still holds the initial weights.
  CHECK(st.teacher.at("cls_w").data == theta0.at("cls_w").data);
  CHECK(st.teacher.at("cls_w").data != st.theta.at("cls_w").data);
  train::train_step(st, f.batches());
  // Step 2: refreshed to the just-updated weights.
  CHECK(st.teacher.at("cls_w").data == st.theta.at("cls_w").data);
}

TEST_CASE("alternate mode takes two optimizer steps") {
  const StepFixture f = StepFixture::make();
  TrainConfig cfg = f.config;
  cfg.alternate = true;
  TrainState st = train::init_state(cfg, f.vocab, f.labels);
  train::train_step(st, f.batches());
  CHECK(st.optimizer.steps_taken() == 2);
  CHECK(st.step == 1);

  TrainState joint = f.state();
  train::train_step(joint, f.batches());
  CHECK(joint.optimizer.steps_taken() == 1);
}

TEST_CASE("non-finite losses raise a divergence error") {
  const StepFixture f = StepFixture::make();
  TrainState st = f.state();
  // Poison the projection head: the classifier stays sane, so only the
  // contrastive loss turns non-finite.
  st.theta.at("proj_w").data[0] = std::nan("");
  st.theta.bump();
  try {
    train::train_step(st, f.batches());
    FAIL("expected divergence");
  } catch (const train::DivergenceError& e) {
    CHECK(std::string(e.what()) == "divergence at step 1");
    CHECK_FALSE(std::isfinite(e.breakdown().l_con));
    CHECK_FALSE(std::isfinite(e.breakdown().l_total));
    CHECK(std::isfinite(e.breakdown().l_sup));
  }
  // State step number does not advance on divergence.
  CHECK(st.step == 0);
}

TEST_CASE("missing required batches are rejected") {
  const StepFixture f = StepFixture::make();
  TrainState st = f.state();
  StepBatches b = f.batches();
  b.labeled = {};
  CHECK_THROWS_WITH_AS(train::train_step(st, b),
                       "train_step: labeled batch required", Error);
  b = f.batches();
  b.uda_augmented = {};
  CHECK_THROWS_WITH_AS(train::train_step(st, b),
                       "train_step: consistency batch required", Error);
  b = f.batches();
  b.con_view = {};
  CHECK_THROWS_WITH_AS(train::train_step(st, b),
                       "train_step: contrastive batch required", Error);
}

TEST_CASE("init_state wires config, snapshots and hash") {
  const StepFixture f = StepFixture::make();
  const TrainState st = f.state();
  CHECK(st.step == 0);
  CHECK(st.queue.capacity() == 8);
  CHECK(st.queue.width() == 4);
  CHECK(st.theta.config.num_classes == 2);
  CHECK(st.theta.config.vocab_size == f.vocab.size());
  CHECK(st.teacher.at("embed").data == st.theta.at("embed").data);
  CHECK(st.momentum.at("embed").data == st.theta.at("embed").data);
  CHECK(st.teacher.role == model::Role::Teacher);
  CHECK(st.momentum.role == model::Role::Momentum);
  CHECK(st.class_labels == std::vector<std::string>{"neg", "pos"});
  CHECK(st.vocab_hash.size() == 16);  // hex of a 64-bit hash
  // Same seed, same initialization.
  const TrainState again = f.state();
  CHECK(again.theta.at("embed").data == st.theta.at("embed").data);
}

TEST_CASE("checkpoints round trip bitwise") {
  const std::string dir = "/tmp/sslc_trainer_test";
  std::filesystem::create_directories(dir);
  const StepFixture f = StepFixture::make();
  TrainState st = f.state();
  train::train_step(st, f.batches());
  train::train_step(st, f.batches());
  st.history.push_back({2, losses::LossBreakdown{}, {}, {}});

  const std::string p1 = dir + "/ck1.json";
  const std::string p2 = dir + "/ck2.json";
  train::save_checkpoint(st, p1);
  TrainState loaded = train::load_checkpoint(p1);
  train::save_checkpoint(loaded, p2);
  CHECK(util::read_file(p1) == util::read_file(p2));

  CHECK(loaded.step == 2);
  CHECK(loaded.theta.at("cls_w").data == st.theta.at("cls_w").data);
  CHECK(loaded.teacher.at("cls_w").data == st.teacher.at("cls_w").data);
  CHECK(loaded.momentum.at("cls_w").data == st.momentum.at("cls_w").data);
  CHECK(loaded.optimizer.steps_taken() == st.optimizer.steps_taken());
  CHECK(loaded.optimizer.first_moments().at("cls_w").data ==
        st.optimizer.first_moments().at("cls_w").data);
  CHECK(loaded.queue.size() == st.queue.size());
  CHECK(loaded.queue.contents().data == st.queue.contents().data);
  CHECK(loaded.vocab_hash == st.vocab_hash);
  CHECK(loaded.class_labels == st.class_labels);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint loading rejects foreign or damaged files") {
  const std::string dir = "/tmp/sslc_trainer_reject";
  std::filesystem::create_directories(dir);
  const StepFixture f = StepFixture::make();
  TrainState st = f.state();
  train::train_step(st, f.batches());
  const std::string path = dir + "/ck.json";
  train::save_checkpoint(st, path);

  SUBCASE("wrong version") {
    std::string text = util::read_file(path);
    const auto pos = text.find("\"version\": 1");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 12, "\"version\": 9");
    util::write_file(path, text);
    CHECK_THROWS_WITH_AS(train::load_checkpoint(path),
                         "checkpoint: unsupported version 9", Error);
  }
  SUBCASE("corrupted tensor data") {
    std::string text = util::read_file(path);
    // cls_b holds two values; drop the first so data no longer matches the
    // declared shape.
    const auto pos = text.find("\"theta/cls_b\"");
    REQUIRE(pos != std::string::npos);
    const auto data_pos = text.find("\"data\"", pos);
    REQUIRE(data_pos != std::string::npos);
    const auto open = text.find('[', data_pos);
    const auto comma = text.find(',', open);
    const auto close = text.find(']', open);
    REQUIRE(comma < close);
    text.erase(open + 1, comma - open);
    util::write_file(path, text);
    CHECK_THROWS_WITH_AS(train::load_checkpoint(path),
                         "checkpoint: corrupted tensor theta/cls_b", Error);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("training runs resume deterministically at the state level") {
  toy::ToyConfig tc;
  tc.classes = 3;
  tc.train_per_class = 4;
  tc.unlabeled_per_class = 6;
  tc.test_per_class = 3;
  tc.seed = 5;
  const toy::ToyCorpus corpus = toy::make_toy_corpus(tc);
  corpus::DatasetSplit split;
  split.train = corpus.train;
  split.test = corpus.test;
  split.uda_pool = corpus.unlabeled;
  split.contrastive_pool = corpus.unlabeled;

  std::vector<std::string> texts;
  for (const auto& e : corpus.train) texts.push_back(e.text);
  for (const auto& e : corpus.unlabeled) texts.push_back(e.text);
  const corpus::Vocabulary vocab = corpus::Vocabulary::build(
      texts, corpus::TokenizerMode::Word, 1, 5000);
  const corpus::LabelIndex labels = corpus::LabelIndex::build(corpus.train);

  TrainConfig cfg;
  cfg.seed = 3;
  cfg.total_steps = 5;
  cfg.eval_every = 0;
  cfg.embed_dim = 6;
  cfg.hidden_dim = 8;
  cfg.proj_dim = 4;
  cfg.queue_m = 12;
  cfg.batch_labeled = 4;
  cfg.batch_uda = 4;
  cfg.batch_contrastive = 4;
  cfg.max_len = 16;
  cfg.attack.method = losses::AttackMethod::Fgm;

  // Straight run to five steps.
  TrainState full = train::init_state(cfg, vocab, labels);
  train::run_training(full, split, vocab);

  // Interrupted run: stop at three, then continue to five.
  TrainConfig head = cfg;
  head.total_steps = 3;
  TrainState part = train::init_state(head, vocab, labels);
  train::run_training(part, split, vocab);
  part.config.total_steps = 5;
  train::run_training(part, split, vocab);

  CHECK(full.step == 5);
  CHECK(part.step == 5);
  for (const auto& [name, t] : full.theta.tensors) {
    CHECK(t.data == part.theta.tensors.at(name).data);
  }
  CHECK(full.queue.contents().data == part.queue.contents().data);
  CHECK(full.momentum.at("embed").data == part.momentum.at("embed").data);
  CHECK(full.labeled_pos.epoch == part.labeled_pos.epoch);
  CHECK(full.labeled_pos.cursor == part.labeled_pos.cursor);
}
