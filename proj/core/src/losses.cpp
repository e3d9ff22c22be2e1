#include "sslc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "sslc/rng.hpp"
#include "sslc/util.hpp"

namespace sslc::losses {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kGradFloor = 1e-12;

void check_prob_rows(const Tensor& t, const char* what) {
  if (t.shape.size() != 2) throw Error(std::string(what) + ": rank 2 required");
  const std::size_t c = t.shape[1];
  for (std::size_t i = 0; i < t.shape[0]; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = t.at(i, j);
      if (!(v >= 0.0) || !std::isfinite(v))
        throw Error(std::string(what) + ": invalid probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw Error(std::string(what) + ": row does not sum to 1");
  }
}

double row_lse(const double* row, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
  return mx + std::log(s);
}

void check_labels(const std::vector<int>& labels, std::size_t rows,
                  std::size_t classes) {
  if (labels.size() != rows) throw Error("labels: size mismatch");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= classes)
      throw Error("labels: label out of range");
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
  if (logits.shape.size() != 2) throw Error("softmax_rows: rank 2 required");
  const std::size_t rows = logits.shape[0];
  const std::size_t n = logits.shape[1];
  Tensor out = logits;
  for (std::size_t i = 0; i < rows; ++i) {
    const double lse = row_lse(logits.data.data() + i * n, n);
    for (std::size_t j = 0; j < n; ++j)
      out.data[i * n + j] = std::exp(logits.at(i, j) - lse);
  }
  return out;
}

Tensor sharpen_rows(const Tensor& probs, double temperature) {
  check_prob_rows(probs, "sharpen_rows");
  if (!(temperature > 0.0))
    throw ConfigError("sharpen_rows: temperature must be positive");
  if (temperature == 1.0) return probs;
  const std::size_t rows = probs.shape[0];
  const std::size_t n = probs.shape[1];
  Tensor out = probs;
  // Work in log space: p^(1/T) = exp(log(p)/T), renormalized per row.
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> a(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double p = probs.at(i, j);
      a[j] = p > 0.0 ? std::log(p) / temperature
                     : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, a[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      a[j] = std::isfinite(a[j]) ? std::exp(a[j] - mx) : 0.0;
      z += a[j];
    }
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = a[j] / z;
  }
  return out;
}

double kl_divergence(const std::vector<double>& p,
                     const std::vector<double>& q) {
  if (p.size() != q.size() || p.empty())
    throw Error("kl_divergence: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (p[i] < 0.0 || q[i] < 0.0) throw Error("kl_divergence: negative mass");
    s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kProbFloor)));
  }
  return s;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.shape.size() != 2) throw Error("cross_entropy: rank 2 required");
  check_labels(labels, logits.shape[0], logits.shape[1]);
  const std::size_t rows = logits.shape[0];
  const std::size_t n = logits.shape[1];
  if (rows == 0) throw Error("cross_entropy: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    const double lse = row_lse(logits.data.data() + i * n, n);
    s += lse - logits.at(i, static_cast<std::size_t>(labels[i]));
  }
  return s / static_cast<double>(rows);
}

double tsa_threshold(TsaSchedule schedule, std::size_t step,
                     std::size_t total_steps, std::size_t num_classes) {
  if (schedule == TsaSchedule::None) return 2.0;  // above any probability
  if (num_classes < 2) throw ConfigError("tsa: num_classes must be >= 2");
  if (total_steps == 0) throw ConfigError("tsa: total_steps must be positive");
  if (step > total_steps) step = total_steps;
  const double inv_c = 1.0 / static_cast<double>(num_classes);
  const double frac =
      static_cast<double>(step) / static_cast<double>(total_steps);
  return frac * (1.0 - inv_c) + inv_c;
}

std::vector<bool> tsa_keep_mask(const Tensor& sup_probs,
                                const std::vector<int>& labels,
                                TsaSchedule schedule, std::size_t step,
                                std::size_t total_steps) {
  check_prob_rows(sup_probs, "tsa_keep_mask");
  check_labels(labels, sup_probs.shape[0], sup_probs.shape[1]);
  const double threshold =
      tsa_threshold(schedule, step, total_steps, sup_probs.shape[1]);
  std::vector<bool> keep(sup_probs.shape[0]);
  for (std::size_t i = 0; i < keep.size(); ++i)
    keep[i] = sup_probs.at(i, static_cast<std::size_t>(labels[i])) < threshold;
  return keep;
}

double supervised_loss(const Tensor& logits, const std::vector<int>& labels,
                       const std::vector<bool>& keep) {
  if (logits.shape.size() != 2) throw Error("supervised_loss: rank 2 required");
  check_labels(labels, logits.shape[0], logits.shape[1]);
  if (keep.size() != labels.size()) throw Error("supervised_loss: keep size");
  const std::size_t n = logits.shape[1];
  double s = 0.0;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!keep[i]) continue;
    const double lse = row_lse(logits.data.data() + i * n, n);
    s += lse - logits.at(i, static_cast<std::size_t>(labels[i]));
    ++kept;
  }
  return kept == 0 ? 0.0 : s / static_cast<double>(kept);
}

UdaTargets uda_targets(const Tensor& teacher_probs, const UdaConfig& cfg) {
  if (!(cfg.confidence_beta >= 0.0 && cfg.confidence_beta <= 1.0))
    throw ConfigError("uda: confidence_beta must be in [0, 1]");
  UdaTargets t;
  t.teacher = sharpen_rows(teacher_probs, cfg.sharpen_temperature);
  const std::size_t rows = t.teacher.shape[0];
  const std::size_t c = t.teacher.shape[1];
  t.keep.assign(rows, true);
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = 0.0;
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, t.teacher.at(i, j));
    if (mx < cfg.confidence_beta) {
      t.keep[i] = false;
      ++t.masked;
    }
  }
  return t;
}

UdaResult uda_consistency(const Tensor& teacher_probs,
                          const Tensor& student_probs, const UdaConfig& cfg) {
  check_prob_rows(student_probs, "uda_consistency");
  if (teacher_probs.shape != student_probs.shape)
    throw Error("uda_consistency: shape mismatch");
  const UdaTargets t = uda_targets(teacher_probs, cfg);
  const std::size_t rows = t.teacher.shape[0];
  const std::size_t c = t.teacher.shape[1];
  UdaResult r;
  r.masked = t.masked;
  std::size_t kept = 0;
  double s = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!t.keep[i]) continue;
    std::vector<double> p(c), q(c);
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = t.teacher.at(i, j);
      q[j] = student_probs.at(i, j);
    }
    s += kl_divergence(p, q);
    ++kept;
  }
  r.value = kept == 0 ? 0.0 : s / static_cast<double>(kept);
  return r;
}

AttackMethod attack_from_name(const std::string& name) {
  if (name == "none") return AttackMethod::None;
  if (name == "fgm") return AttackMethod::Fgm;
  if (name == "pgd") return AttackMethod::Pgd;
  throw ConfigError("unknown attack method: " + name);
}

const char* attack_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::None: return "none";
    case AttackMethod::Fgm: return "fgm";
    default: return "pgd";
  }
}

void AttackConfig::validate() const {
  if (method == AttackMethod::None) return;
  if (!(epsilon >= 0.0)) throw ConfigError("attack: epsilon must be >= 0");
  if (method == AttackMethod::Pgd) {
    if (!(eta >= 0.0)) throw ConfigError("attack: eta must be >= 0");
    if (k_steps < 1) throw ConfigError("attack: k_steps must be >= 1");
    if (!(sigma2 >= 0.0)) throw ConfigError("attack: sigma2 must be >= 0");
  }
}

namespace {

std::size_t scope_block(const Tensor& t, NormScope scope) {
  if (scope == NormScope::PerBatch) return t.data.size();
  if (t.shape.empty()) throw Error("attack: scalar input");
  return t.data.size() / t.shape[0];
}

double block_norm(const double* p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += p[i] * p[i];
  return std::sqrt(s);
}

// Scale each scope block back onto the epsilon sphere if it left the ball.
// Returns the largest block norm after projection.
double project_ball(Tensor& delta, double epsilon, NormScope scope) {
  const std::size_t block = scope_block(delta, scope);
  double worst = 0.0;
  for (std::size_t off = 0; off < delta.data.size(); off += block) {
    double* p = delta.data.data() + off;
    double n = block_norm(p, block);
    if (n > epsilon) {
      const double f = n > 0.0 ? epsilon / n : 0.0;
      for (std::size_t i = 0; i < block; ++i) p[i] *= f;
      n = block_norm(p, block);
    }
    worst = std::max(worst, n);
  }
  return worst;
}

}  // namespace

Tensor fgm_perturb(const Tensor& g_x, double epsilon, NormScope scope) {
  if (!(epsilon >= 0.0)) throw ConfigError("fgm: epsilon must be >= 0");
  Tensor delta = g_x;
  const std::size_t block = scope_block(delta, scope);
  for (std::size_t off = 0; off < delta.data.size(); off += block) {
    double* p = delta.data.data() + off;
    const double n = block_norm(p, block);
    const double f = n < kGradFloor ? 0.0 : epsilon / n;
    for (std::size_t i = 0; i < block; ++i) p[i] *= f;
  }
  return delta;
}

Tensor pgd_perturb(const GradAtFn& grad_at, const AttackConfig& cfg,
                   const std::vector<std::size_t>& shape, std::uint64_t seed,
                   PgdTrace* trace) {
  cfg.validate();
  if (cfg.method != AttackMethod::Pgd) throw ConfigError("pgd: wrong method");
  Tensor delta = Tensor::zeros(shape);
  if (cfg.sigma2 > 0.0) {
    Rng rng(seed);
    const double sigma = std::sqrt(cfg.sigma2);
    for (double& v : delta.data) v = rng.normal(0.0, sigma);
  }
  double worst = project_ball(delta, cfg.epsilon, cfg.scope);
  if (trace != nullptr) {
    trace->norms.clear();
    trace->norms.push_back(worst);
    trace->steps_taken = 0;
  }
  const std::size_t block = scope_block(delta, cfg.scope);
  for (int t = 0; t < cfg.k_steps; ++t) {
    Tensor g = grad_at(delta);
    if (g.shape != delta.shape) throw Error("pgd: gradient shape mismatch");
    if (block_norm(g.data.data(), g.data.size()) < kGradFloor) break;
    for (std::size_t off = 0; off < delta.data.size(); off += block) {
      const double* gp = g.data.data() + off;
      const double n = block_norm(gp, block);
      if (n < kGradFloor) continue;
      double* dp = delta.data.data() + off;
      const double f = cfg.eta / n;
      for (std::size_t i = 0; i < block; ++i) dp[i] += f * gp[i];
    }
    worst = project_ball(delta, cfg.epsilon, cfg.scope);
    if (trace != nullptr) {
      trace->norms.push_back(worst);
      ++trace->steps_taken;
    }
  }
  return delta;
}

namespace {

// d(mean CE)/d(logits) = (softmax - onehot) / B.
Tensor ce_upstream(const Tensor& logits, const std::vector<int>& labels) {
  Tensor up = softmax_rows(logits);
  const std::size_t rows = up.shape[0];
  for (std::size_t i = 0; i < rows; ++i)
    up.at(i, static_cast<std::size_t>(labels[i])) -= 1.0;
  for (double& v : up.data) v /= static_cast<double>(rows);
  return up;
}

}  // namespace

Tensor compute_attack_delta(const model::Params& params,
                            const model::Batch& batch,
                            const std::vector<int>& labels,
                            const AttackConfig& cfg,
                            const model::DropoutSpec& dropout,
                            std::uint64_t seed, PgdTrace* trace) {
  cfg.validate();
  const std::size_t b = batch.size();
  const std::size_t l = std::max<std::size_t>(batch.max_len(), 1);
  const std::size_t d = params.config.embed_dim;
  if (cfg.method == AttackMethod::None) return Tensor::zeros({b, l, d});

  auto grad_at = [&](const Tensor* delta) -> Tensor {
    auto [logits, fwd] = model::forward_classify(params, batch, dropout, delta);
    check_labels(labels, logits.shape[0], logits.shape[1]);
    model::GradientSet g = model::backward(fwd, ce_upstream(logits, labels));
    return std::move(g.g_x);
  };

  if (cfg.method == AttackMethod::Fgm) {
    Tensor g = grad_at(nullptr);
    return fgm_perturb(g, cfg.epsilon, cfg.scope);
  }
  return pgd_perturb([&](const Tensor& delta) { return grad_at(&delta); }, cfg,
                     {b, l, d}, seed, trace);
}

double adversarial_loss(const model::Params& params, const model::Batch& batch,
                        const std::vector<int>& labels, const AttackConfig& cfg,
                        const model::DropoutSpec& dropout, std::uint64_t seed) {
  const Tensor delta =
      compute_attack_delta(params, batch, labels, cfg, dropout, seed);
  auto [logits, fwd] = model::forward_classify(params, batch, dropout, &delta);
  return cross_entropy(logits, labels);
}

double info_nce(const Tensor& anchors, const Tensor& positives,
                const Tensor& queue, const Tensor& extra_negatives,
                double tau) {
  if (!(tau > 0.0)) throw ConfigError("info_nce: tau must be positive");
  if (anchors.shape.size() != 2 || positives.shape != anchors.shape)
    throw Error("info_nce: anchors/positives shape mismatch");
  const std::size_t b = anchors.shape[0];
  const std::size_t p = anchors.shape[1];
  if (b == 0) throw Error("info_nce: empty batch");
  auto check_extra = [&](const Tensor& t, const char* what) {
    if (t.data.empty()) return std::size_t{0};
    if (t.shape.size() != 2 || t.shape[1] != p)
      throw Error(std::string("info_nce: ") + what + " width mismatch");
    return t.shape[0];
  };
  const std::size_t m = check_extra(queue, "queue");
  const std::size_t h = check_extra(extra_negatives, "extra negatives");

  double total = 0.0;
  std::vector<double> terms;
  terms.reserve(b + m + h);
  for (std::size_t i = 0; i < b; ++i) {
    const double* a = anchors.data.data() + i * p;
    terms.clear();
    auto push_sims = [&](const Tensor& t, std::size_t rows) {
      for (std::size_t j = 0; j < rows; ++j) {
        const double* r = t.data.data() + j * p;
        double s = 0.0;
        for (std::size_t k = 0; k < p; ++k) s += a[k] * r[k];
        terms.push_back(s / tau);
      }
    };
    push_sims(positives, b);
    const double pos = terms[i];
    push_sims(queue, m);
    push_sims(extra_negatives, h);
    // Sorted accumulation makes the value independent of negative order.
    std::sort(terms.begin(), terms.end());
    const double mx = terms.back();
    double z = 0.0;
    for (double t : terms) z += std::exp(t - mx);
    total += mx + std::log(z) - pos;
  }
  return total / static_cast<double>(b);
}

LossBreakdown combine(double l_sup, double l_unsup, double l_adv, double l_con,
                      const LossWeights& w) {
  LossBreakdown b;
  b.l_sup = l_sup;
  b.l_unsup = l_unsup;
  b.l_adv = l_adv;
  b.l_con = l_con;
  b.l_uda = l_sup + w.lambda_unsup * l_unsup + w.alpha_adv * l_adv;
  b.l_total = w.omega_joint * b.l_uda + (1.0 - w.omega_joint) * l_con;
  return b;
}

diff::Var ce_loss_node(diff::Tape& tape, diff::Var logits,
                       const std::vector<int>& labels,
                       const std::vector<bool>* keep) {
  const Tensor& lg = tape.value(logits);
  if (lg.shape.size() != 2) throw Error("ce_loss_node: rank 2 required");
  check_labels(labels, lg.shape[0], lg.shape[1]);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (keep == nullptr || (*keep)[i]) ++kept;
  if (kept == 0) return tape.constant(Tensor::scalar(0.0));
  Tensor w = Tensor::zeros(lg.shape);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (keep != nullptr && !(*keep)[i]) continue;
    w.at(i, static_cast<std::size_t>(labels[i])) =
        -1.0 / static_cast<double>(kept);
  }
  return tape.weighted_sum(tape.log_softmax_rows(logits), std::move(w));
}

diff::Var kl_loss_node(diff::Tape& tape, diff::Var logits,
                       const UdaTargets& targets) {
  const Tensor& lg = tape.value(logits);
  if (lg.shape != targets.teacher.shape)
    throw Error("kl_loss_node: shape mismatch");
  const std::size_t rows = lg.shape[0];
  const std::size_t c = lg.shape[1];
  std::size_t kept = 0;
  for (bool k : targets.keep)
    if (k) ++kept;
  if (kept == 0) return tape.constant(Tensor::scalar(0.0));
  Tensor w = Tensor::zeros(lg.shape);
  double entropy_part = 0.0;  // sum of t*log(t), constant in the parameters
  for (std::size_t i = 0; i < rows; ++i) {
    if (!targets.keep[i]) continue;
    for (std::size_t j = 0; j < c; ++j) {
      const double t = targets.teacher.at(i, j);
      if (t == 0.0) continue;
      w.at(i, j) = -t / static_cast<double>(kept);
      entropy_part += t * std::log(t) / static_cast<double>(kept);
    }
  }
  diff::Var cross =
      tape.weighted_sum(tape.log_softmax_rows(logits), std::move(w));
  return tape.add_const_scalar(cross, entropy_part);
}

diff::Var info_nce_node(diff::Tape& tape, diff::Var anchors, diff::Var positives,
                        const Tensor& queue, const Tensor& extra_negatives,
                        double tau) {
  if (!(tau > 0.0)) throw ConfigError("info_nce: tau must be positive");
  const Tensor& a = tape.value(anchors);
  if (a.shape.size() != 2 || tape.value(positives).shape != a.shape)
    throw Error("info_nce_node: anchors/positives shape mismatch");
  diff::Var sims = tape.matmul_nt(anchors, positives);
  diff::Var pos = tape.take_diag(sims);
  diff::Var all = sims;
  if (!queue.data.empty())
    all = tape.concat_cols(all, tape.matmul_nt(anchors, tape.constant(queue)));
  if (!extra_negatives.data.empty())
    all = tape.concat_cols(
        all, tape.matmul_nt(anchors, tape.constant(extra_negatives)));
  diff::Var lse = tape.row_logsumexp(tape.scale(all, 1.0 / tau));
  return tape.mean_all(tape.sub(lse, tape.scale(pos, 1.0 / tau)));
}

}  // namespace sslc::losses
