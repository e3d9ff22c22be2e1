#include "sslc/model.hpp"

#include <algorithm>
#include <utility>

#include "sslc/rng.hpp"
#include "sslc/util.hpp"

namespace sslc::model {

const char* arch_name(Arch a) {
  return a == Arch::MeanPool ? "mean_pool" : "tiny_attention";
}

Arch arch_from_name(const std::string& name) {
  if (name == "mean_pool") return Arch::MeanPool;
  if (name == "tiny_attention") return Arch::TinyAttention;
  throw ConfigError("unknown arch: " + name);
}

const char* role_name(Role r) {
  switch (r) {
    case Role::Student: return "student";
    case Role::Teacher: return "teacher";
    default: return "momentum";
  }
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
  if (embed_dim == 0 || hidden_dim == 0 || proj_dim == 0)
    throw ConfigError("model: dimensions must be positive");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0))
    throw ConfigError("model: dropout_p must be in [0, 1)");
}

namespace {

std::map<std::string, std::vector<std::size_t>> shape_plan(
    const ModelConfig& cfg) {
  std::map<std::string, std::vector<std::size_t>> plan;
  plan["embed"] = {cfg.vocab_size, cfg.embed_dim};
  if (cfg.arch == Arch::TinyAttention) {
    plan["attn_wq"] = {cfg.embed_dim, cfg.embed_dim};
    plan["attn_wk"] = {cfg.embed_dim, cfg.embed_dim};
    plan["attn_wv"] = {cfg.embed_dim, cfg.embed_dim};
  }
  plan["ff1_w"] = {cfg.embed_dim, cfg.hidden_dim};
  plan["ff1_b"] = {cfg.hidden_dim};
  plan["ff2_w"] = {cfg.hidden_dim, cfg.embed_dim};
  plan["ff2_b"] = {cfg.embed_dim};
  plan["cls_w"] = {cfg.embed_dim, cfg.num_classes};
  plan["cls_b"] = {cfg.num_classes};
  plan["proj_w"] = {cfg.embed_dim, cfg.proj_dim};
  plan["proj_b"] = {cfg.proj_dim};
  return plan;
}

}  // namespace

Params Params::init(const ModelConfig& cfg, std::uint64_t seed, Role role) {
  cfg.validate();
  Params p;
  p.config = cfg;
  p.role = role;
  Rng rng(seed);
  // map order is fixed, so the draw sequence is reproducible per seed.
  for (const auto& [name, shape] : shape_plan(cfg)) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = rng.uniform(-0.05, 0.05);
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

Tensor& Params::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

const Tensor& Params::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

std::size_t Params::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.data.size();
  return n;
}

Params snapshot(const Params& source, Role role) {
  Params copy = source;
  copy.role = role;
  copy.version = 0;
  return copy;
}

void momentum_update(Params& momentum, const Params& student, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw ConfigError("momentum_update: gamma must be in [0, 1]");
  if (momentum.config != student.config)
    throw Error("momentum_update: config mismatch");
  for (auto& [name, t] : momentum.tensors) {
    const Tensor& s = student.at(name);
    for (std::size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = gamma * t.data[i] + (1.0 - gamma) * s.data[i];
  }
  momentum.bump();
}

Batch Batch::from_token_seqs(const std::vector<corpus::TokenSeq>& seqs) {
  Batch b;
  b.seqs.reserve(seqs.size());
  for (const auto& s : seqs) b.seqs.push_back(s.ids);
  return b;
}

std::size_t Batch::max_len() const {
  std::size_t m = 0;
  for (const auto& s : seqs) m = std::max(m, s.size());
  return m;
}

TapeModel::TapeModel(diff::Tape& tape, const Params& params)
    : tape_(&tape), params_(&params) {
  params.config.validate();
  for (const auto& [name, t] : params.tensors)
    leaves_.emplace(name, tape_->leaf(t));
}

std::size_t TapeModel::padded_len_for(const Batch& batch) const {
  return std::max<std::size_t>(batch.max_len(), 1);
}

TapeModel::Trunk TapeModel::run_trunk(const Batch& batch,
                                      const DropoutSpec& dropout,
                                      diff::Var delta) {
  const ModelConfig& cfg = params_->config;
  const std::size_t b = batch.size();
  if (b == 0) throw Error("forward: empty batch");
  const std::size_t l = padded_len_for(batch);
  const std::size_t d = cfg.embed_dim;

  std::vector<int> ids(b * l, corpus::Vocabulary::kPad);
  Tensor valid = Tensor::zeros({b, l});
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = batch.seqs[i];
    if (s.empty()) throw Error("forward: empty sequence in batch");
    if (s.size() > l) throw Error("forward: sequence longer than padded length");
    for (std::size_t j = 0; j < s.size(); ++j) {
      ids[i * l + j] = s[j];
      valid.at(i, j) = 1.0;
    }
  }

  diff::Var x = tape_->gather_rows(leaves_.at("embed"), ids, b, l);
  if (delta.valid()) {
    const Tensor& dt = tape_->value(delta);
    if (dt.shape != std::vector<std::size_t>({b, l, d}))
      throw Error("forward: delta shape mismatch");
    x = tape_->add(x, delta);
  }
  const diff::Var x_input = x;

  if (dropout.enabled && cfg.dropout_p > 0.0) {
    const double keep = 1.0 - cfg.dropout_p;
    Rng rng(dropout.seed);
    Tensor mask = Tensor::zeros({b, l, d});
    for (double& m : mask.data) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    x = tape_->mul_const(x, std::move(mask));
  }

  if (cfg.arch == Arch::TinyAttention) {
    diff::Var attn =
        tape_->self_attention(x, leaves_.at("attn_wq"), leaves_.at("attn_wk"),
                              leaves_.at("attn_wv"), valid);
    x = tape_->add(x, attn);
  }

  diff::Var pooled = tape_->masked_mean_rows(x, valid);
  diff::Var h = tape_->tanh_elem(tape_->add_row_bias(
      tape_->matmul(pooled, leaves_.at("ff1_w")), leaves_.at("ff1_b")));
  diff::Var z = tape_->add_row_bias(tape_->matmul(h, leaves_.at("ff2_w")),
                                    leaves_.at("ff2_b"));
  return Trunk{z, x_input, std::move(valid), l};
}

TapeModel::Forward TapeModel::classify(const Batch& batch,
                                       const DropoutSpec& dropout,
                                       diff::Var delta) {
  Trunk t = run_trunk(batch, dropout, delta);
  diff::Var logits = tape_->add_row_bias(
      tape_->matmul(t.pooled, leaves_.at("cls_w")), leaves_.at("cls_b"));
  return Forward{logits, t.x_input, std::move(t.valid), t.padded_len};
}

TapeModel::Forward TapeModel::embed(const Batch& batch,
                                    const DropoutSpec& dropout,
                                    diff::Var delta) {
  Trunk t = run_trunk(batch, dropout, delta);
  diff::Var proj = tape_->add_row_bias(
      tape_->matmul(t.pooled, leaves_.at("proj_w")), leaves_.at("proj_b"));
  diff::Var unit = tape_->l2_normalize_rows(proj);
  return Forward{unit, t.x_input, std::move(t.valid), t.padded_len};
}

namespace {

std::pair<Tensor, ForwardTrace> run_standalone(const Params& params,
                                               const Batch& batch,
                                               const DropoutSpec& dropout,
                                               const Tensor* delta,
                                               bool classify) {
  ForwardTrace trace;
  trace.tape = std::make_unique<diff::Tape>();
  TapeModel m(*trace.tape, params);
  diff::Var dv{};
  if (delta != nullptr) dv = trace.tape->constant(*delta);
  TapeModel::Forward f = classify ? m.classify(batch, dropout, dv)
                                  : m.embed(batch, dropout, dv);
  trace.out = f.out;
  trace.x_input = f.x_input;
  trace.leaves = m.leaves();
  trace.params = &params;
  trace.params_version = params.version;
  return {trace.tape->value(f.out), std::move(trace)};
}

}  // namespace

std::pair<Tensor, ForwardTrace> forward_classify(const Params& params,
                                                 const Batch& batch,
                                                 const DropoutSpec& dropout,
                                                 const Tensor* delta) {
  return run_standalone(params, batch, dropout, delta, true);
}

std::pair<Tensor, ForwardTrace> forward_embed(const Params& params,
                                              const Batch& batch,
                                              const DropoutSpec& dropout,
                                              const Tensor* delta) {
  return run_standalone(params, batch, dropout, delta, false);
}

GradientSet backward(ForwardTrace& trace, const Tensor& upstream) {
  if (trace.consumed) throw Error("backward: trace already consumed");
  if (trace.params == nullptr || !trace.tape)
    throw Error("backward: empty trace");
  if (trace.params->version != trace.params_version)
    throw Error("stale trace: parameters changed since forward");
  trace.consumed = true;
  trace.tape->backward(trace.out, upstream);
  GradientSet g;
  for (const auto& [name, var] : trace.leaves)
    g.params.emplace(name, trace.tape->gradient(var));
  g.g_x = trace.tape->gradient(trace.x_input);
  return g;
}

}  // namespace sslc::model
