#include "sslc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "jsonio.hpp"
#include "sslc/eval.hpp"
#include "sslc/rng.hpp"
#include "sslc/util.hpp"

namespace sslc::train {

namespace {

// Stream tags: every stochastic purpose draws from its own (seed, tag, step)
// stream, so turning a branch off cannot shift any other branch's draws.
constexpr std::uint64_t kStreamInit = 0x11;
constexpr std::uint64_t kStreamPoolLabeled = 0x21;
constexpr std::uint64_t kStreamPoolUda = 0x22;
constexpr std::uint64_t kStreamPoolCon = 0x23;
constexpr std::uint64_t kStreamSupDrop = 0x31;
constexpr std::uint64_t kStreamAdvDrop = 0x32;
constexpr std::uint64_t kStreamAttack = 0x33;
constexpr std::uint64_t kStreamUdaDrop = 0x34;
constexpr std::uint64_t kStreamUdaAug = 0x35;
constexpr std::uint64_t kStreamConAug = 0x36;
constexpr std::uint64_t kStreamConDropAnchor = 0x37;
constexpr std::uint64_t kStreamConDropView = 0x38;
constexpr std::uint64_t kStreamEvalSample = 0x41;

using ojson = nlohmann::ordered_json;

}  // namespace

NegativeQueue::NegativeQueue(std::size_t capacity, std::size_t width)
    : capacity_(capacity), width_(width), slots_(capacity) {}

std::size_t NegativeQueue::push(const Tensor& embeddings) {
  if (embeddings.shape.size() != 2 || embeddings.shape[1] != width_)
    throw Error("queue_push: width mismatch");
  const std::size_t rows = embeddings.shape[0];
  std::size_t evicted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    ++pushed_total_;
    if (capacity_ == 0) {
      ++evicted;
      continue;
    }
    std::vector<double> row(embeddings.data.begin() + r * width_,
                            embeddings.data.begin() + (r + 1) * width_);
    if (count_ == capacity_) {
      slots_[head_] = std::move(row);
      head_ = (head_ + 1) % capacity_;
      ++evicted;
    } else {
      slots_[(head_ + count_) % capacity_] = std::move(row);
      ++count_;
    }
  }
  return evicted;
}

Tensor NegativeQueue::contents() const {
  Tensor out = Tensor::zeros({count_, width_});
  for (std::size_t i = 0; i < count_; ++i) {
    const auto& row = slots_[(head_ + i) % capacity_];
    std::copy(row.begin(), row.end(), out.data.begin() + i * width_);
  }
  return out;
}

Optimizer::Optimizer(const OptimizerConfig& cfg, const model::Params& params)
    : cfg_(cfg) {
  for (const auto& [name, t] : params.tensors) {
    m_.emplace(name, Tensor::zeros(t.shape));
    v_.emplace(name, Tensor::zeros(t.shape));
  }
}

void Optimizer::step(model::Params& params,
                     const std::map<std::string, Tensor>& grads) {
  if (m_.empty()) throw Error("optimizer: not initialized");
  ++t_;
  for (auto& [name, theta] : params.tensors) {
    const auto git = grads.find(name);
    if (git == grads.end()) throw Error("optimizer: missing gradient " + name);
    const Tensor& g = git->second;
    if (!g.same_shape(theta)) throw Error("optimizer: gradient shape " + name);
    if (cfg_.kind == OptKind::Sgd) {
      for (std::size_t i = 0; i < theta.data.size(); ++i)
        theta.data[i] -= cfg_.lr * (g.data[i] +
                                    cfg_.weight_decay * theta.data[i]);
      continue;
    }
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
      m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g.data[i];
      v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      // Decoupled weight decay: not folded into the moment estimates.
      theta.data[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                  cfg_.weight_decay * theta.data[i]);
    }
  }
  params.bump();
}

void Optimizer::restore(std::uint64_t t, std::map<std::string, Tensor> m,
                        std::map<std::string, Tensor> v) {
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& msg) { throw ConfigError(msg); };
  if (!(lambda_unsup >= 0.0)) bad("lambda must be >= 0");
  if (!(alpha_adv >= 0.0)) bad("alpha must be >= 0");
  if (!(omega_joint >= 0.0 && omega_joint <= 1.0)) bad("omega must be in [0, 1]");
  if (!(tau > 0.0)) bad("tau must be > 0");
  if (!(gamma >= 0.0 && gamma < 1.0)) bad("gamma must be in [0, 1)");
  if (!(dup_rate >= 0.0)) bad("dup_rate must be >= 0");
  if (!(uda.confidence_beta >= 0.0 && uda.confidence_beta <= 1.0))
    bad("beta_conf must be in [0, 1]");
  if (!(uda.sharpen_temperature > 0.0)) bad("sharpen_t must be > 0");
  if (batch_labeled < 1) bad("batch_labeled must be >= 1");
  if (batch_uda < 1) bad("batch_uda must be >= 1");
  if (batch_contrastive < 1) bad("batch_contrastive must be >= 1");
  if (max_len < 1) bad("max_len must be >= 1");
  if (teacher_refresh_every < 1) bad("teacher_refresh_every must be >= 1");
  if (!(optimizer.lr > 0.0)) bad("optimizer.lr must be > 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0))
    bad("optimizer.beta1 must be in [0, 1)");
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
    bad("optimizer.beta2 must be in [0, 1)");
  if (!(optimizer.eps > 0.0)) bad("optimizer.eps must be > 0");
  if (!(optimizer.weight_decay >= 0.0)) bad("optimizer.weight_decay must be >= 0");
  if (!(neg_sim_threshold >= 0.0 && neg_sim_threshold <= 1.0))
    bad("negatives.sim_threshold must be in [0, 1]");
  auto check_prob = [&](double p, const std::string& key) {
    if (!(p >= 0.0 && p <= 1.0)) bad(key + " must be in [0, 1]");
  };
  check_prob(uda_augment.eda.p_insert, "uda_augment.p_insert");
  check_prob(uda_augment.eda.p_delete, "uda_augment.p_delete");
  check_prob(uda_augment.eda.p_replace, "uda_augment.p_replace");
  check_prob(uda_augment.tfidf_p, "uda_augment.tfidf_p");
  check_prob(neg_eda.p_insert, "negatives.p_insert");
  check_prob(neg_eda.p_delete, "negatives.p_delete");
  check_prob(neg_eda.p_replace, "negatives.p_replace");
  if (embed_dim == 0 || hidden_dim == 0 || proj_dim == 0)
    bad("model dimensions must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) bad("model.dropout must be in [0, 1)");
  attack.validate();
}

namespace {

std::size_t read_size(jsonio::ObjectReader& r, const std::string& key,
                      std::size_t def) {
  const std::int64_t v = r.integer(key, static_cast<std::int64_t>(def));
  if (v < 0) throw ConfigError(r.key_path(key) + ": must be >= 0");
  return static_cast<std::size_t>(v);
}

losses::TsaSchedule tsa_from_name(const std::string& name) {
  if (name == "none") return losses::TsaSchedule::None;
  if (name == "linear") return losses::TsaSchedule::Linear;
  throw ConfigError("tsa: unknown schedule '" + name + "'");
}

const char* tsa_name(losses::TsaSchedule s) {
  return s == losses::TsaSchedule::None ? "none" : "linear";
}

losses::NormScope scope_from_name(const std::string& name) {
  if (name == "per_example") return losses::NormScope::PerExample;
  if (name == "per_batch") return losses::NormScope::PerBatch;
  throw ConfigError("attack.scope: unknown scope '" + name + "'");
}

const char* scope_name(losses::NormScope s) {
  return s == losses::NormScope::PerExample ? "per_example" : "per_batch";
}

UdaAugmentKind uda_kind_from_name(const std::string& name) {
  if (name == "identity") return UdaAugmentKind::Identity;
  if (name == "eda") return UdaAugmentKind::Eda;
  if (name == "tfidf") return UdaAugmentKind::Tfidf;
  if (name == "back_translation") return UdaAugmentKind::BackTranslation;
  throw ConfigError("uda_augment.kind: unknown kind '" + name + "'");
}

const char* uda_kind_name(UdaAugmentKind k) {
  switch (k) {
    case UdaAugmentKind::Identity: return "identity";
    case UdaAugmentKind::Eda: return "eda";
    case UdaAugmentKind::Tfidf: return "tfidf";
    default: return "back_translation";
  }
}

OptKind opt_kind_from_name(const std::string& name) {
  if (name == "adam") return OptKind::Adam;
  if (name == "sgd") return OptKind::Sgd;
  throw ConfigError("optimizer.kind: unknown kind '" + name + "'");
}

}  // namespace

TrainConfig TrainConfig::from_json(const std::string& text,
                                   const std::string& where) {
  const jsonio::json j = jsonio::parse(text, where);
  jsonio::ObjectReader r(j, "");
  TrainConfig c;
  c.seed = static_cast<std::uint64_t>(
      r.integer("seed", static_cast<std::int64_t>(c.seed)));
  c.total_steps = read_size(r, "total_steps", c.total_steps);
  c.eval_every = read_size(r, "eval_every", c.eval_every);
  c.checkpoint_every = read_size(r, "checkpoint_every", c.checkpoint_every);
  c.teacher_refresh_every =
      read_size(r, "teacher_refresh_every", c.teacher_refresh_every);
  c.alternate = r.boolean("alternate", c.alternate);
  c.lambda_unsup = r.number("lambda", c.lambda_unsup);
  c.alpha_adv = r.number("alpha", c.alpha_adv);
  c.omega_joint = r.number("omega", c.omega_joint);
  c.tau = r.number("tau", c.tau);
  c.gamma = r.number("gamma", c.gamma);
  c.queue_m = read_size(r, "queue_m", c.queue_m);
  c.dup_rate = r.number("dup_rate", c.dup_rate);
  c.uda.confidence_beta = r.number("beta_conf", c.uda.confidence_beta);
  c.uda.sharpen_temperature = r.number("sharpen_t", c.uda.sharpen_temperature);
  c.tsa = tsa_from_name(r.string("tsa", tsa_name(c.tsa)));
  {
    jsonio::ObjectReader a = r.object("attack");
    c.attack.method =
        losses::attack_from_name(a.string("method", attack_name(c.attack.method)));
    c.attack.epsilon = a.number("eps", c.attack.epsilon);
    c.attack.eta = a.number("eta", c.attack.epsilon / 3.0);
    c.attack.k_steps = static_cast<int>(a.integer("k_steps", c.attack.k_steps));
    c.attack.sigma2 =
        a.number("sigma2", (c.attack.epsilon / 10.0) * (c.attack.epsilon / 10.0));
    c.attack.scope = scope_from_name(a.string("scope", scope_name(c.attack.scope)));
    a.finish();
  }
  {
    jsonio::ObjectReader u = r.object("uda_augment");
    c.uda_augment.kind =
        uda_kind_from_name(u.string("kind", uda_kind_name(c.uda_augment.kind)));
    c.uda_augment.eda.p_insert = u.number("p_insert", c.uda_augment.eda.p_insert);
    c.uda_augment.eda.p_delete = u.number("p_delete", c.uda_augment.eda.p_delete);
    c.uda_augment.eda.p_replace =
        u.number("p_replace", c.uda_augment.eda.p_replace);
    c.uda_augment.tfidf_p = u.number("tfidf_p", c.uda_augment.tfidf_p);
    c.uda_augment.command = u.string("command", c.uda_augment.command);
    u.finish();
  }
  {
    jsonio::ObjectReader n = r.object("negatives");
    c.neg_sim_threshold = n.number("sim_threshold", c.neg_sim_threshold);
    c.neg_eda.p_insert = n.number("p_insert", c.neg_eda.p_insert);
    c.neg_eda.p_delete = n.number("p_delete", c.neg_eda.p_delete);
    c.neg_eda.p_replace = n.number("p_replace", c.neg_eda.p_replace);
    n.finish();
  }
  if (r.has("lexicon")) c.lexicon_path = r.require_string("lexicon");
  c.batch_labeled = read_size(r, "batch_labeled", c.batch_labeled);
  c.batch_uda = read_size(r, "batch_uda", c.batch_uda);
  c.batch_contrastive = read_size(r, "batch_contrastive", c.batch_contrastive);
  c.max_len = read_size(r, "max_len", c.max_len);
  c.eval_sample = read_size(r, "eval_sample", c.eval_sample);
  {
    jsonio::ObjectReader o = r.object("optimizer");
    c.optimizer.kind = opt_kind_from_name(
        o.string("kind", c.optimizer.kind == OptKind::Adam ? "adam" : "sgd"));
    c.optimizer.lr = o.number("lr", c.optimizer.lr);
    c.optimizer.beta1 = o.number("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.number("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.number("eps", c.optimizer.eps);
    c.optimizer.weight_decay = o.number("weight_decay", c.optimizer.weight_decay);
    o.finish();
  }
  {
    jsonio::ObjectReader m = r.object("model");
    c.arch = model::arch_from_name(m.string("arch", model::arch_name(c.arch)));
    c.embed_dim = read_size(m, "embed_dim", c.embed_dim);
    c.hidden_dim = read_size(m, "hidden_dim", c.hidden_dim);
    c.proj_dim = read_size(m, "proj_dim", c.proj_dim);
    c.dropout_p = m.number("dropout", c.dropout_p);
    m.finish();
  }
  r.finish();
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  return from_json(util::read_file(path), path);
}

std::string TrainConfig::to_json() const {
  ojson j;
  j["seed"] = seed;
  j["total_steps"] = total_steps;
  j["eval_every"] = eval_every;
  j["checkpoint_every"] = checkpoint_every;
  j["teacher_refresh_every"] = teacher_refresh_every;
  j["alternate"] = alternate;
  j["lambda"] = lambda_unsup;
  j["alpha"] = alpha_adv;
  j["omega"] = omega_joint;
  j["tau"] = tau;
  j["gamma"] = gamma;
  j["queue_m"] = queue_m;
  j["dup_rate"] = dup_rate;
  j["beta_conf"] = uda.confidence_beta;
  j["sharpen_t"] = uda.sharpen_temperature;
  j["tsa"] = tsa_name(tsa);
  j["attack"] = {{"method", losses::attack_name(attack.method)},
                 {"eps", attack.epsilon},
                 {"eta", attack.eta},
                 {"k_steps", attack.k_steps},
                 {"sigma2", attack.sigma2},
                 {"scope", scope_name(attack.scope)}};
  j["uda_augment"] = {{"kind", uda_kind_name(uda_augment.kind)},
                      {"p_insert", uda_augment.eda.p_insert},
                      {"p_delete", uda_augment.eda.p_delete},
                      {"p_replace", uda_augment.eda.p_replace},
                      {"tfidf_p", uda_augment.tfidf_p},
                      {"command", uda_augment.command}};
  j["negatives"] = {{"sim_threshold", neg_sim_threshold},
                    {"p_insert", neg_eda.p_insert},
                    {"p_delete", neg_eda.p_delete},
                    {"p_replace", neg_eda.p_replace}};
  if (lexicon_path) j["lexicon"] = *lexicon_path;
  j["batch_labeled"] = batch_labeled;
  j["batch_uda"] = batch_uda;
  j["batch_contrastive"] = batch_contrastive;
  j["max_len"] = max_len;
  j["eval_sample"] = eval_sample;
  j["optimizer"] = {{"kind", optimizer.kind == OptKind::Adam ? "adam" : "sgd"},
                    {"lr", optimizer.lr},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"eps", optimizer.eps},
                    {"weight_decay", optimizer.weight_decay}};
  j["model"] = {{"arch", model::arch_name(arch)},
                {"embed_dim", embed_dim},
                {"hidden_dim", hidden_dim},
                {"proj_dim", proj_dim},
                {"dropout", dropout_p}};
  return j.dump(2);
}

model::ModelConfig TrainConfig::model_config(std::size_t vocab_size,
                                             std::size_t num_classes) const {
  model::ModelConfig mc;
  mc.arch = arch;
  mc.vocab_size = vocab_size;
  mc.embed_dim = embed_dim;
  mc.hidden_dim = hidden_dim;
  mc.proj_dim = proj_dim;
  mc.num_classes = num_classes;
  mc.dropout_p = dropout_p;
  return mc;
}

PoolCycler::PoolCycler(std::size_t pool_size, std::uint64_t seed,
                       std::uint64_t tag, PoolPosition start)
    : pool_size_(pool_size), seed_(seed), tag_(tag), pos_(start) {
  if (pool_size_ > 0) {
    if (pos_.cursor > pool_size_) throw Error("pool cursor out of range");
    reshuffle();
  }
}

void PoolCycler::reshuffle() {
  order_.resize(pool_size_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(derive_seed(seed_, tag_, pos_.epoch));
  rng.shuffle(order_);
}

std::vector<std::size_t> PoolCycler::take(std::size_t n) {
  if (pool_size_ == 0) throw Error("pool is empty");
  std::vector<std::size_t> out;
  out.reserve(n);
  while (out.size() < n) {
    if (pos_.cursor == pool_size_) {
      ++pos_.epoch;
      pos_.cursor = 0;
      reshuffle();
    }
    out.push_back(order_[pos_.cursor++]);
  }
  return out;
}

std::string history_row_json(const HistoryRow& row) {
  ojson j;
  j["step"] = row.step;
  j["l_sup"] = row.losses.l_sup;
  j["l_unsup"] = row.losses.l_unsup;
  j["l_adv"] = row.losses.l_adv;
  j["l_con"] = row.losses.l_con;
  j["l_total"] = row.losses.l_total;
  j["masked"] = row.losses.masked_consistency;
  if (row.eval_accuracy) j["eval_accuracy"] = *row.eval_accuracy;
  if (row.eval_micro_f1) j["eval_micro_f1"] = *row.eval_micro_f1;
  return j.dump();
}

DivergenceError::DivergenceError(std::uint64_t step,
                                 losses::LossBreakdown breakdown)
    : Error("divergence at step " + std::to_string(step)),
      breakdown_(std::move(breakdown)) {}

namespace {

bool breakdown_finite(const losses::LossBreakdown& b) {
  return std::isfinite(b.l_sup) && std::isfinite(b.l_unsup) &&
         std::isfinite(b.l_adv) && std::isfinite(b.l_con) &&
         std::isfinite(b.l_total);
}

struct BranchValues {
  double l_sup = 0.0, l_unsup = 0.0, l_adv = 0.0, l_con = 0.0;
  std::size_t masked = 0, kept = 0;
};

using Terms = std::vector<std::pair<double, diff::Var>>;

void build_supervised_terms(TrainState& state, const StepBatches& b,
                            std::uint64_t s, diff::Tape& tape,
                            model::TapeModel& tm, Terms& terms,
                            BranchValues& out) {
  const TrainConfig& cfg = state.config;
  if (b.labeled.size() == 0) throw Error("train_step: labeled batch required");
  if (b.labels.size() != b.labeled.size())
    throw Error("train_step: labels size mismatch");
  const double om = cfg.omega_joint;

  const model::DropoutSpec sup_drop{true,
                                    derive_seed(cfg.seed, kStreamSupDrop, s)};
  auto fsup = tm.classify(b.labeled, sup_drop);
  const Tensor sup_probs = losses::softmax_rows(tape.value(fsup.out));
  const std::vector<bool> keep = losses::tsa_keep_mask(
      sup_probs, b.labels, cfg.tsa, s, std::max<std::size_t>(cfg.total_steps, 1));
  out.kept = static_cast<std::size_t>(
      std::count(keep.begin(), keep.end(), true));
  diff::Var vsup = losses::ce_loss_node(tape, fsup.out, b.labels, &keep);
  out.l_sup = tape.value(vsup).data[0];
  terms.emplace_back(om, vsup);

  if (cfg.lambda_unsup > 0.0) {
    if (b.uda_clean.size() == 0 || b.uda_augmented.size() != b.uda_clean.size())
      throw Error("train_step: consistency batch required");
    auto [tlogits, ttrace] = model::forward_classify(
        state.teacher, b.uda_clean, model::DropoutSpec{});
    const losses::UdaTargets targets =
        losses::uda_targets(losses::softmax_rows(tlogits), cfg.uda);
    const model::DropoutSpec uda_drop{true,
                                      derive_seed(cfg.seed, kStreamUdaDrop, s)};
    auto fuda = tm.classify(b.uda_augmented, uda_drop);
    diff::Var vuda = losses::kl_loss_node(tape, fuda.out, targets);
    out.l_unsup = tape.value(vuda).data[0];
    out.masked = targets.masked;
    terms.emplace_back(om * cfg.lambda_unsup, vuda);
  }

  if (cfg.alpha_adv > 0.0 &&
      cfg.attack.method != losses::AttackMethod::None) {
    const model::DropoutSpec adv_drop{true,
                                      derive_seed(cfg.seed, kStreamAdvDrop, s)};
    const Tensor delta = losses::compute_attack_delta(
        state.theta, b.labeled, b.labels, cfg.attack, adv_drop,
        derive_seed(cfg.seed, kStreamAttack, s));
    auto fadv = tm.classify(b.labeled, adv_drop, tape.constant(delta));
    diff::Var vadv = losses::ce_loss_node(tape, fadv.out, b.labels);
    out.l_adv = tape.value(vadv).data[0];
    terms.emplace_back(om * cfg.alpha_adv, vadv);
  }
}

void build_contrastive_terms(TrainState& state, const StepBatches& b,
                             std::uint64_t s, diff::Tape& tape,
                             model::TapeModel& tm, Terms& terms,
                             BranchValues& out) {
  const TrainConfig& cfg = state.config;
  if (b.con_anchor.size() == 0 || b.con_view.size() != b.con_anchor.size())
    throw Error("train_step: contrastive batch required");
  auto fh = tm.embed(b.con_anchor,
                     {true, derive_seed(cfg.seed, kStreamConDropAnchor, s)});
  auto fhp = tm.embed(b.con_view,
                      {true, derive_seed(cfg.seed, kStreamConDropView, s)});
  const Tensor queue_entries = state.queue.contents();
  Tensor extra;
  if (b.con_negatives.size() > 0) {
    auto [neg, ntrace] =
        model::forward_embed(state.momentum, b.con_negatives, {});
    extra = std::move(neg);
  }
  diff::Var vcon = losses::info_nce_node(tape, fh.out, fhp.out, queue_entries,
                                         extra, cfg.tau);
  out.l_con = tape.value(vcon).data[0];
  terms.emplace_back(1.0 - cfg.omega_joint, vcon);
}

void apply_update(TrainState& state, diff::Tape& tape, model::TapeModel& tm,
                  const Terms& terms) {
  if (terms.empty()) return;
  diff::Var total = tape.lincomb(terms);
  tape.backward(total);
  std::map<std::string, Tensor> grads;
  for (const auto& [name, var] : tm.leaves())
    grads.emplace(name, tape.gradient(var));
  state.optimizer.step(state.theta, grads);
}

}  // namespace

losses::LossBreakdown train_step(TrainState& state, const StepBatches& b) {
  const TrainConfig& cfg = state.config;
  const std::uint64_t s = state.step + 1;
  const bool sup_on = cfg.omega_joint > 0.0;
  const bool con_on = cfg.omega_joint < 1.0;
  BranchValues vals;

  if (!cfg.alternate) {
    diff::Tape tape;
    model::TapeModel tm(tape, state.theta);
    Terms terms;
    if (sup_on) build_supervised_terms(state, b, s, tape, tm, terms, vals);
    if (con_on) build_contrastive_terms(state, b, s, tape, tm, terms, vals);
    apply_update(state, tape, tm, terms);
  } else {
    // Two sequential updates: the joint objective's parts first, then the
    // contrastive part at the already-updated parameters.
    if (sup_on) {
      diff::Tape tape;
      model::TapeModel tm(tape, state.theta);
      Terms terms;
      build_supervised_terms(state, b, s, tape, tm, terms, vals);
      apply_update(state, tape, tm, terms);
    }
    if (con_on) {
      diff::Tape tape;
      model::TapeModel tm(tape, state.theta);
      Terms terms;
      build_contrastive_terms(state, b, s, tape, tm, terms, vals);
      apply_update(state, tape, tm, terms);
    }
  }

  losses::LossBreakdown breakdown = losses::combine(
      vals.l_sup, vals.l_unsup, vals.l_adv, vals.l_con,
      losses::LossWeights{cfg.lambda_unsup, cfg.alpha_adv, cfg.omega_joint});
  breakdown.masked_consistency = vals.masked;
  breakdown.kept_supervised = vals.kept;
  if (!breakdown_finite(breakdown)) throw DivergenceError(s, breakdown);

  model::momentum_update(state.momentum, state.theta, cfg.gamma);
  if (con_on) {
    auto [hplus, htrace] =
        model::forward_embed(state.momentum, b.con_view, model::DropoutSpec{});
    state.queue.push(hplus);
  }
  if (s % cfg.teacher_refresh_every == 0)
    state.teacher = model::snapshot(state.theta, model::Role::Teacher);
  state.step = s;
  return breakdown;
}

TrainState init_state(const TrainConfig& config,
                      const corpus::Vocabulary& vocab,
                      const corpus::LabelIndex& labels) {
  config.validate();
  const model::ModelConfig mc =
      config.model_config(vocab.size(), labels.num_classes());
  TrainState st;
  st.config = config;
  st.theta = model::Params::init(mc, derive_seed(config.seed, kStreamInit, 0));
  st.teacher = model::snapshot(st.theta, model::Role::Teacher);
  st.momentum = model::snapshot(st.theta, model::Role::Momentum);
  st.optimizer = Optimizer(config.optimizer, st.theta);
  st.queue = NegativeQueue(config.queue_m, config.proj_dim);
  st.class_labels = labels.labels();
  st.vocab_hash = util::fnv1a_hex(vocab.to_json());
  return st;
}

namespace {

std::vector<corpus::TokenSeq> encode_pool(const std::vector<corpus::Example>& pool,
                                          const corpus::Vocabulary& vocab,
                                          std::size_t max_len) {
  std::vector<corpus::TokenSeq> out;
  out.reserve(pool.size());
  for (const auto& ex : pool)
    out.push_back(corpus::tokenize_encode(ex.text, vocab, max_len));
  return out;
}

model::Batch gather_batch(const std::vector<corpus::TokenSeq>& pool,
                          const std::vector<std::size_t>& idxs) {
  model::Batch b;
  b.seqs.reserve(idxs.size());
  for (std::size_t i : idxs) b.seqs.push_back(pool[i].ids);
  return b;
}

}  // namespace

RunResult run_training(TrainState& state, const corpus::DatasetSplit& split,
                       const corpus::Vocabulary& vocab,
                       const RunOptions& options) {
  const TrainConfig& cfg = state.config;
  cfg.validate();
  const std::string vhash = util::fnv1a_hex(vocab.to_json());
  if (state.vocab_hash.empty()) state.vocab_hash = vhash;
  if (state.vocab_hash != vhash)
    throw Error("vocabulary mismatch: state built for hash " + state.vocab_hash +
                ", given " + vhash);

  const bool sup_on = cfg.omega_joint > 0.0;
  const bool uda_on = sup_on && cfg.lambda_unsup > 0.0;
  const bool adv_on = sup_on && cfg.alpha_adv > 0.0 &&
                      cfg.attack.method != losses::AttackMethod::None;
  (void)adv_on;  // adversarial branch reuses the labeled pool
  const bool con_on = cfg.omega_joint < 1.0;
  const bool negatives_on =
      con_on && cfg.neg_sim_threshold > 0.0 &&
      (cfg.neg_eda.p_insert > 0.0 || cfg.neg_eda.p_delete > 0.0 ||
       cfg.neg_eda.p_replace > 0.0);

  if (sup_on && split.train.empty())
    throw Error("run_training: labeled pool required (omega > 0)");
  if (uda_on && split.uda_pool.empty())
    throw Error("run_training: unlabeled uda pool required (lambda > 0)");
  if (con_on && split.contrastive_pool.empty())
    throw Error("run_training: contrastive pool required (omega < 1)");

  const corpus::LabelIndex labels =
      corpus::LabelIndex::from_labels(state.class_labels);

  std::vector<corpus::TokenSeq> train_seqs, uda_seqs, con_seqs, test_seqs;
  std::vector<int> train_labels, test_labels;
  if (sup_on) {
    train_seqs = encode_pool(split.train, vocab, cfg.max_len);
    train_labels.reserve(split.train.size());
    for (const auto& ex : split.train) {
      if (!ex.label) throw Error("run_training: unlabeled example in train pool");
      train_labels.push_back(static_cast<int>(labels.index_of(*ex.label)));
    }
  }
  if (uda_on) uda_seqs = encode_pool(split.uda_pool, vocab, cfg.max_len);
  if (con_on) con_seqs = encode_pool(split.contrastive_pool, vocab, cfg.max_len);

  const bool eval_on = cfg.eval_every > 0 && !split.test.empty();
  std::vector<std::size_t> eval_idx;
  if (eval_on) {
    test_seqs = encode_pool(split.test, vocab, cfg.max_len);
    for (const auto& ex : split.test) {
      if (!ex.label) throw Error("run_training: unlabeled example in test pool");
      test_labels.push_back(static_cast<int>(labels.index_of(*ex.label)));
    }
    eval_idx.resize(test_seqs.size());
    std::iota(eval_idx.begin(), eval_idx.end(), std::size_t{0});
    if (cfg.eval_sample > 0 && cfg.eval_sample < eval_idx.size()) {
      Rng r(derive_seed(cfg.seed, kStreamEvalSample, 0));
      eval_idx = r.sample_indices(eval_idx.size(), cfg.eval_sample);
    }
  }

  augment::Lexicon lexicon;
  if (cfg.lexicon_path) lexicon = augment::load_lexicon(*cfg.lexicon_path);
  std::map<std::string, double> tfidf;
  if (uda_on && cfg.uda_augment.kind == UdaAugmentKind::Tfidf) {
    std::vector<std::vector<std::string>> docs;
    docs.reserve(uda_seqs.size());
    for (const auto& s : uda_seqs) docs.push_back(s.tokens);
    tfidf = augment::build_tfidf(docs);
  }
  augment::BackTranslator translator = augment::BackTranslator::identity();
  if (uda_on && cfg.uda_augment.kind == UdaAugmentKind::BackTranslation) {
    translator = cfg.uda_augment.command.empty()
                     ? augment::BackTranslator::lexicon_roundtrip(lexicon)
                     : augment::BackTranslator::external(cfg.uda_augment.command);
  }

  PoolCycler lab_cycler(sup_on ? train_seqs.size() : 0, cfg.seed,
                        kStreamPoolLabeled, state.labeled_pos);
  PoolCycler uda_cycler(uda_on ? uda_seqs.size() : 0, cfg.seed, kStreamPoolUda,
                        state.uda_pos);
  PoolCycler con_cycler(con_on ? con_seqs.size() : 0, cfg.seed, kStreamPoolCon,
                        state.con_pos);

  auto augment_uda = [&](const corpus::TokenSeq& seq, Rng& rng) -> corpus::TokenSeq {
    switch (cfg.uda_augment.kind) {
      case UdaAugmentKind::Identity:
        return seq;
      case UdaAugmentKind::Eda:
        return augment::eda_transform(seq, cfg.uda_augment.eda, lexicon, vocab,
                                      rng);
      case UdaAugmentKind::Tfidf:
        return augment::tfidf_replace(seq, tfidf, cfg.uda_augment.tfidf_p, vocab,
                                      rng)
            .seq;
      default: {
        const std::string round_trip =
            translator.translate(util::join(seq.tokens, " "));
        return corpus::tokenize_encode(round_trip, vocab, cfg.max_len);
      }
    }
  };

  RunResult result;
  for (std::uint64_t s = state.step + 1; s <= cfg.total_steps; ++s) {
    StepBatches b;
    if (sup_on) {
      const auto idxs = lab_cycler.take(cfg.batch_labeled);
      b.labeled = gather_batch(train_seqs, idxs);
      b.labels.reserve(idxs.size());
      for (std::size_t i : idxs) b.labels.push_back(train_labels[i]);
    }
    if (uda_on) {
      const auto idxs = uda_cycler.take(cfg.batch_uda);
      b.uda_clean = gather_batch(uda_seqs, idxs);
      Rng aug_rng(derive_seed(cfg.seed, kStreamUdaAug, s));
      b.uda_augmented.seqs.reserve(idxs.size());
      for (std::size_t i : idxs)
        b.uda_augmented.seqs.push_back(augment_uda(uda_seqs[i], aug_rng).ids);
    }
    if (con_on) {
      const auto idxs = con_cycler.take(cfg.batch_contrastive);
      std::vector<corpus::TokenSeq> texts;
      texts.reserve(idxs.size());
      for (std::size_t i : idxs) texts.push_back(con_seqs[i]);
      Rng con_rng(derive_seed(cfg.seed, kStreamConAug, s));
      augment::AugConfig acfg;
      acfg.dup_rate = cfg.dup_rate;
      acfg.eda = cfg.neg_eda;
      acfg.neg_sim_threshold = negatives_on ? cfg.neg_sim_threshold : 0.0;
      const augment::ContrastiveBatch cb = augment::build_contrastive_batch(
          texts, acfg, lexicon, vocab, con_rng);
      for (const auto& pair : cb.pairs) {
        if (pair.polarity == augment::Polarity::Positive) {
          b.con_anchor.seqs.push_back(pair.anchor.ids);
          b.con_view.seqs.push_back(pair.view.ids);
        } else {
          b.con_negatives.seqs.push_back(pair.view.ids);
        }
      }
    }
    state.labeled_pos = lab_cycler.position();
    state.uda_pos = uda_cycler.position();
    state.con_pos = con_cycler.position();

    HistoryRow row;
    row.step = s;
    row.losses = train_step(state, b);

    if (eval_on && s % cfg.eval_every == 0) {
      std::vector<corpus::TokenSeq> sample;
      std::vector<int> sample_labels;
      sample.reserve(eval_idx.size());
      for (std::size_t i : eval_idx) {
        sample.push_back(test_seqs[i]);
        sample_labels.push_back(test_labels[i]);
      }
      const std::vector<int> preds = eval::predict_classes(state.theta, sample);
      const eval::MetricsReport mr =
          eval::classify_metrics(preds, sample_labels, labels);
      row.eval_accuracy = mr.accuracy;
      row.eval_micro_f1 = mr.micro_f1;
    }

    state.history.push_back(row);
    result.history.push_back(row);
    if (options.history_line) options.history_line(history_row_json(row));
    if (!options.checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
        s % cfg.checkpoint_every == 0)
      save_checkpoint(state, options.checkpoint_path);
    if (options.log && (s % 100 == 0 || s == cfg.total_steps)) {
      options.log("step " + std::to_string(s) + "/" +
                  std::to_string(cfg.total_steps) +
                  " l_total=" + util::format_sig9(row.losses.l_total));
    }
  }
  if (!options.checkpoint_path.empty() && state.step == cfg.total_steps)
    save_checkpoint(state, options.checkpoint_path);
  return result;
}

namespace {

ojson tensor_to_json(const Tensor& t) {
  ojson j;
  j["shape"] = t.shape;
  j["data"] = t.data;
  return j;
}

Tensor tensor_from_json(const jsonio::json& j, const std::string& what) {
  if (!j.is_object() || !j.contains("shape") || !j.contains("data"))
    throw Error("checkpoint: corrupted tensor " + what);
  Tensor t;
  for (const auto& d : j.at("shape")) {
    if (!d.is_number_unsigned()) throw Error("checkpoint: corrupted tensor " + what);
    t.shape.push_back(d.get<std::size_t>());
  }
  const auto& data = j.at("data");
  if (!data.is_array() || data.size() != shape_product(t.shape))
    throw Error("checkpoint: corrupted tensor " + what);
  t.data.reserve(data.size());
  for (const auto& v : data) {
    if (!v.is_number()) throw Error("checkpoint: corrupted tensor " + what);
    t.data.push_back(v.get<double>());
  }
  return t;
}

void write_params(ojson& tensors, const std::string& prefix,
                  const model::Params& p) {
  for (const auto& [name, t] : p.tensors)
    tensors[prefix + "/" + name] = tensor_to_json(t);
}

void read_params(const jsonio::json& tensors, const std::string& prefix,
                 model::Params& p) {
  for (auto& [name, t] : p.tensors) {
    const std::string key = prefix + "/" + name;
    if (!tensors.contains(key)) throw Error("checkpoint: missing tensor " + key);
    Tensor loaded = tensor_from_json(tensors.at(key), key);
    if (loaded.shape != t.shape)
      throw Error("checkpoint: corrupted tensor shape " + key);
    t = std::move(loaded);
  }
  p.bump();
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  ojson j;
  j["version"] = 1;
  j["config"] = ojson::parse(state.config.to_json());
  j["step"] = state.step;
  const model::ModelConfig& mc = state.theta.config;
  j["model"] = {{"arch", model::arch_name(mc.arch)},
                {"vocab_size", mc.vocab_size},
                {"embed_dim", mc.embed_dim},
                {"hidden_dim", mc.hidden_dim},
                {"proj_dim", mc.proj_dim},
                {"num_classes", mc.num_classes},
                {"dropout_p", mc.dropout_p}};
  ojson tensors = ojson::object();
  write_params(tensors, "theta", state.theta);
  write_params(tensors, "teacher", state.teacher);
  write_params(tensors, "momentum", state.momentum);
  for (const auto& [name, t] : state.optimizer.first_moments())
    tensors["opt/m/" + name] = tensor_to_json(t);
  for (const auto& [name, t] : state.optimizer.second_moments())
    tensors["opt/v/" + name] = tensor_to_json(t);
  tensors["queue/entries"] = tensor_to_json(state.queue.contents());
  j["tensors"] = std::move(tensors);
  j["optimizer_t"] = state.optimizer.steps_taken();
  j["queue"] = {{"capacity", state.queue.capacity()},
                {"width", state.queue.width()}};
  j["rng"] = {{"seed", state.config.seed},
              {"labeled", {{"epoch", state.labeled_pos.epoch},
                           {"cursor", state.labeled_pos.cursor}}},
              {"uda", {{"epoch", state.uda_pos.epoch},
                       {"cursor", state.uda_pos.cursor}}},
              {"con", {{"epoch", state.con_pos.epoch},
                       {"cursor", state.con_pos.cursor}}}};
  j["labels"] = state.class_labels;
  j["vocab_hash"] = state.vocab_hash;
  util::write_file(path, j.dump(2) + "\n");
}

TrainState load_checkpoint(const std::string& path) {
  const jsonio::json j = jsonio::parse(util::read_file(path), path);
  if (!j.is_object() || !j.contains("version") ||
      !j.at("version").is_number_integer())
    throw Error("checkpoint: missing version");
  if (j.at("version").get<int>() != 1)
    throw Error("checkpoint: unsupported version " +
                j.at("version").dump());
  for (const char* key :
       {"config", "step", "model", "tensors", "optimizer_t", "queue", "rng",
        "labels", "vocab_hash"}) {
    if (!j.contains(key))
      throw Error(std::string("checkpoint: missing field ") + key);
  }

  TrainState st;
  st.config = TrainConfig::from_json(j.at("config").dump(), path + "#config");

  const auto& jm = j.at("model");
  model::ModelConfig mc;
  mc.arch = model::arch_from_name(jm.at("arch").get<std::string>());
  mc.vocab_size = jm.at("vocab_size").get<std::size_t>();
  mc.embed_dim = jm.at("embed_dim").get<std::size_t>();
  mc.hidden_dim = jm.at("hidden_dim").get<std::size_t>();
  mc.proj_dim = jm.at("proj_dim").get<std::size_t>();
  mc.num_classes = jm.at("num_classes").get<std::size_t>();
  mc.dropout_p = jm.at("dropout_p").get<double>();
  mc.validate();

  st.theta = model::Params::init(mc, 0);
  st.teacher = model::Params::init(mc, 0, model::Role::Teacher);
  st.momentum = model::Params::init(mc, 0, model::Role::Momentum);
  const auto& tensors = j.at("tensors");
  read_params(tensors, "theta", st.theta);
  read_params(tensors, "teacher", st.teacher);
  read_params(tensors, "momentum", st.momentum);

  st.optimizer = Optimizer(st.config.optimizer, st.theta);
  std::map<std::string, Tensor> m, v;
  for (const auto& [name, t] : st.theta.tensors) {
    (void)t;
    const std::string mk = "opt/m/" + name;
    const std::string vk = "opt/v/" + name;
    if (!tensors.contains(mk) || !tensors.contains(vk))
      throw Error("checkpoint: missing optimizer state for " + name);
    m.emplace(name, tensor_from_json(tensors.at(mk), mk));
    v.emplace(name, tensor_from_json(tensors.at(vk), vk));
  }
  st.optimizer.restore(j.at("optimizer_t").get<std::uint64_t>(), std::move(m),
                       std::move(v));

  const auto& q = j.at("queue");
  st.queue = NegativeQueue(q.at("capacity").get<std::size_t>(),
                           q.at("width").get<std::size_t>());
  const Tensor entries =
      tensor_from_json(tensors.at("queue/entries"), "queue/entries");
  if (entries.shape[0] > 0) st.queue.push(entries);

  st.step = j.at("step").get<std::uint64_t>();
  const auto& rng = j.at("rng");
  auto read_pos = [&](const char* key) {
    PoolPosition p;
    p.epoch = rng.at(key).at("epoch").get<std::uint64_t>();
    p.cursor = rng.at(key).at("cursor").get<std::size_t>();
    return p;
  };
  st.labeled_pos = read_pos("labeled");
  st.uda_pos = read_pos("uda");
  st.con_pos = read_pos("con");
  st.class_labels = j.at("labels").get<std::vector<std::string>>();
  st.vocab_hash = j.at("vocab_hash").get<std::string>();
  return st;
}

}  // namespace sslc::train
