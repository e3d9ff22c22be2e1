#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "sslc/losses.hpp"
#include "sslc/model.hpp"
#include "sslc/rng.hpp"
#include "sslc/tape.hpp"
#include "sslc/tensor.hpp"
#include "sslc/util.hpp"

using namespace sslc;

namespace {

// Shared fixture: mean-pool model d=8, padded length 6, 3 classes.
struct Fixture {
  model::Params params;
  model::Params teacher;
  model::Batch sup_batch;
  std::vector<int> labels;
  model::Batch uda_batch;
  losses::UdaTargets targets;
  model::Batch con_anchors;
  model::Batch con_views;
  Tensor queue;
  Tensor extras;

  static Fixture make(std::uint64_t seed) {
    model::ModelConfig cfg;
    cfg.vocab_size = 30;
    cfg.embed_dim = 8;
    cfg.hidden_dim = 10;
    cfg.proj_dim = 5;
    cfg.num_classes = 3;
    cfg.dropout_p = 0.1;

    Fixture f{model::Params::init(cfg, seed),
              model::Params::init(cfg, seed + 1, model::Role::Teacher),
              {}, {}, {}, {}, {}, {}, Tensor{}, Tensor{}};
    Rng rng(seed + 2);
    auto random_batch = [&](std::size_t b, std::size_t max_l) {
      model::Batch batch;
      for (std::size_t i = 0; i < b; ++i) {
        const auto l = static_cast<std::size_t>(
            rng.uniform_int(2, static_cast<std::int64_t>(max_l)));
        std::vector<int> ids(l);
        for (int& id : ids)
          id = static_cast<int>(rng.uniform_int(2, 29));
        batch.seqs.push_back(std::move(ids));
      }
      return batch;
    };
    f.sup_batch = random_batch(4, 6);
    for (std::size_t i = 0; i < 4; ++i)
      f.labels.push_back(static_cast<int>(rng.uniform_int(0, 2)));
    f.uda_batch = random_batch(4, 6);
    f.con_anchors = random_batch(3, 6);
    f.con_views = random_batch(3, 6);

    auto [tl, ttr] = model::forward_classify(f.teacher, f.uda_batch, {});
    losses::UdaConfig ucfg;
    ucfg.confidence_beta = 0.3;
    ucfg.sharpen_temperature = 0.7;
    f.targets = losses::uda_targets(losses::softmax_rows(tl), ucfg);

    f.queue = Tensor::zeros({5, 5});
    f.extras = Tensor::zeros({2, 5});
    for (Tensor* t : {&f.queue, &f.extras}) {
      for (std::size_t i = 0; i < t->shape[0]; ++i) {
        double n2 = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          t->at(i, j) = rng.normal();
          n2 += t->at(i, j) * t->at(i, j);
        }
        for (std::size_t j = 0; j < 5; ++j) t->at(i, j) /= std::sqrt(n2);
      }
    }
    return f;
  }
};

constexpr model::DropoutSpec kSupDrop{true, 101};
constexpr model::DropoutSpec kAnchorDrop{true, 202};
constexpr model::DropoutSpec kViewDrop{true, 203};
const double kTau = 0.08;

struct Objective {
  // Value at arbitrary parameters, all randomness frozen.
  std::function<double(const model::Params&)> value;
  // Implementation gradient at the fixture parameters.
  std::map<std::string, Tensor> grads;
};

std::map<std::string, Tensor> leaf_grads(diff::Tape& tape,
                                         const model::TapeModel& tm) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, var] : tm.leaves()) out[name] = tape.gradient(var);
  return out;
}

Objective sup_objective(const Fixture& f) {
  Objective o;
  o.value = [&f](const model::Params& p) {
    auto [logits, tr] = model::forward_classify(p, f.sup_batch, kSupDrop);
    return losses::cross_entropy(logits, f.labels);
  };
  diff::Tape tape;
  model::TapeModel tm(tape, f.params);
  const auto fwd = tm.classify(f.sup_batch, kSupDrop);
  tape.backward(losses::ce_loss_node(tape, fwd.out, f.labels));
  o.grads = leaf_grads(tape, tm);
  return o;
}

Objective unsup_objective(const Fixture& f) {
  Objective o;
  o.value = [&f](const model::Params& p) {
    auto [logits, tr] = model::forward_classify(p, f.uda_batch, {});
    const Tensor student = losses::softmax_rows(logits);
    double s = 0.0;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < f.targets.keep.size(); ++i) {
      if (!f.targets.keep[i]) continue;
      std::vector<double> tp(3), sp(3);
      for (std::size_t c = 0; c < 3; ++c) {
        tp[c] = f.targets.teacher.at(i, c);
        sp[c] = student.at(i, c);
      }
      s += losses::kl_divergence(tp, sp);
      ++kept;
    }
    return kept == 0 ? 0.0 : s / static_cast<double>(kept);
  };
  diff::Tape tape;
  model::TapeModel tm(tape, f.params);
  const auto fwd = tm.classify(f.uda_batch, {});
  tape.backward(losses::kl_loss_node(tape, fwd.out, f.targets));
  o.grads = leaf_grads(tape, tm);
  return o;
}

Objective adv_objective(const Fixture& f) {
  losses::AttackConfig cfg;
  cfg.method = losses::AttackMethod::Fgm;
  cfg.epsilon = 1e-2;
  // The attack direction is computed once at the base parameters and then
  // frozen, matching what the implementation differentiates.
  const Tensor delta =
      losses::compute_attack_delta(f.params, f.sup_batch, f.labels, cfg, {}, 1);
  Objective o;
  o.value = [&f, delta](const model::Params& p) {
    auto [logits, tr] = model::forward_classify(p, f.sup_batch, {}, &delta);
    return losses::cross_entropy(logits, f.labels);
  };
  diff::Tape tape;
  model::TapeModel tm(tape, f.params);
  const auto fwd = tm.classify(f.sup_batch, {}, tape.constant(delta));
  tape.backward(losses::ce_loss_node(tape, fwd.out, f.labels));
  o.grads = leaf_grads(tape, tm);
  return o;
}

Objective con_objective(const Fixture& f) {
  Objective o;
  o.value = [&f](const model::Params& p) {
    auto [a, t1] = model::forward_embed(p, f.con_anchors, kAnchorDrop);
    auto [v, t2] = model::forward_embed(p, f.con_views, kViewDrop);
    return losses::info_nce(a, v, f.queue, f.extras, kTau);
  };
  diff::Tape tape;
  model::TapeModel tm(tape, f.params);
  const auto a = tm.embed(f.con_anchors, kAnchorDrop);
  const auto v = tm.embed(f.con_views, kViewDrop);
  tape.backward(
      losses::info_nce_node(tape, a.out, v.out, f.queue, f.extras, kTau));
  o.grads = leaf_grads(tape, tm);
  return o;
}

// Max relative error of the implementation gradient against central
// differences over `coords` sampled parameter coordinates.
double max_rel_error(const Fixture& f, const Objective& o, std::size_t coords,
                     std::uint64_t seed) {
  std::vector<std::pair<std::string, std::size_t>> flat;
  for (const auto& [name, t] : f.params.tensors) {
    for (std::size_t i = 0; i < t.data.size(); ++i) flat.emplace_back(name, i);
  }
  Rng rng(seed);
  double worst = 0.0;
  const double h = 1e-5;
  for (std::size_t k = 0; k < coords; ++k) {
    const auto& [name, idx] = flat[rng.next_below(flat.size())];
    model::Params plus = f.params;
    model::Params minus = f.params;
    plus.at(name).data[idx] += h;
    minus.at(name).data[idx] -= h;
    const double numeric = (o.value(plus) - o.value(minus)) / (2.0 * h);
    const double analytic = o.grads.at(name).data[idx];
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), 1e-4});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("objective gradients match central finite differences") {
  const Fixture f = Fixture::make(2024);
  SUBCASE("supervised") {
    CHECK(max_rel_error(f, sup_objective(f), 200, 1) <= 1e-4);
  }
  SUBCASE("consistency") {
    CHECK(max_rel_error(f, unsup_objective(f), 200, 2) <= 1e-4);
  }
  SUBCASE("adversarial") {
    CHECK(max_rel_error(f, adv_objective(f), 200, 3) <= 1e-4);
  }
  SUBCASE("contrastive") {
    CHECK(max_rel_error(f, con_objective(f), 200, 4) <= 1e-4);
  }
}

TEST_CASE("input-embedding gradients match finite differences") {
  const Fixture f = Fixture::make(7);
  const std::size_t b = f.sup_batch.size();
  const std::size_t l = f.sup_batch.max_len();
  const std::size_t d = 8;

  diff::Tape tape;
  model::TapeModel tm(tape, f.params);
  const diff::Var delta_leaf = tape.leaf(Tensor::zeros({b, l, d}));
  const auto fwd = tm.classify(f.sup_batch, {}, delta_leaf);
  tape.backward(losses::ce_loss_node(tape, fwd.out, f.labels));
  const Tensor g_x = tape.gradient(delta_leaf);

  auto value_at = [&](const Tensor& delta) {
    auto [logits, tr] = model::forward_classify(f.params, f.sup_batch, {},
                                                &delta);
    return losses::cross_entropy(logits, f.labels);
  };
  Rng rng(9);
  const double h = 1e-5;
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t idx = rng.next_below(g_x.data.size());
    Tensor plus = Tensor::zeros({b, l, d});
    Tensor minus = Tensor::zeros({b, l, d});
    plus.data[idx] += h;
    minus.data[idx] -= h;
    const double numeric = (value_at(plus) - value_at(minus)) / (2.0 * h);
    const double denom =
        std::max({std::abs(g_x.data[idx]), std::abs(numeric), 1e-4});
    worst = std::max(worst, std::abs(g_x.data[idx] - numeric) / denom);
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("the checker flags a corrupted gradient") {
  const Fixture f = Fixture::make(99);
  Objective o = sup_objective(f);
  o.grads.at("cls_w").data[0] += 0.05;
  // Sampling every coordinate of cls_w guarantees the corrupted one is hit.
  double worst = 0.0;
  const double h = 1e-5;
  for (std::size_t idx = 0; idx < f.params.tensors.at("cls_w").data.size();
       ++idx) {
    model::Params plus = f.params;
    model::Params minus = f.params;
    plus.at("cls_w").data[idx] += h;
    minus.at("cls_w").data[idx] -= h;
    const double numeric = (o.value(plus) - o.value(minus)) / (2.0 * h);
    const double analytic = o.grads.at("cls_w").data[idx];
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), 1e-4});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  CHECK(worst > 1e-4);
}
