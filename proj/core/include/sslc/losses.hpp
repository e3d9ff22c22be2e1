#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sslc/model.hpp"
#include "sslc/tape.hpp"
#include "sslc/tensor.hpp"

namespace sslc::losses {

// ---- probability utilities (value level) ----

Tensor softmax_rows(const Tensor& logits);
// Temperature sharpening p_i^(1/T), renormalized per row. T=1 is identity.
Tensor sharpen_rows(const Tensor& probs, double temperature);
// KL(p || q) for one pair of distributions; q is floored at 1e-12 and
// 0*log(0/q) contributes 0.
double kl_divergence(const std::vector<double>& p, const std::vector<double>& q);
// Mean negative log-likelihood of the labels under softmax(logits).
double cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// ---- supervised loss with optional example gating (TSA) ----

// Keep an example while its correct-class probability is below the schedule
// threshold; at or above it the example drops out of the mean.
enum class TsaSchedule { None, Linear };

std::vector<bool> tsa_keep_mask(const Tensor& sup_probs,
                                const std::vector<int>& labels,
                                TsaSchedule schedule, std::size_t step,
                                std::size_t total_steps);
double tsa_threshold(TsaSchedule schedule, std::size_t step,
                     std::size_t total_steps, std::size_t num_classes);

// Mean CE over kept examples; zero if nothing is kept.
double supervised_loss(const Tensor& logits, const std::vector<int>& labels,
                       const std::vector<bool>& keep);

// ---- consistency loss ----

struct UdaConfig {
  double confidence_beta = 0.8;  // rows with max sharpened prob below it drop
  double sharpen_temperature = 1.0;
};

struct UdaTargets {
  Tensor teacher;          // sharpened teacher rows, in batch order
  std::vector<bool> keep;  // confidence mask per row
  std::size_t masked = 0;
};

UdaTargets uda_targets(const Tensor& teacher_probs, const UdaConfig& cfg);

struct UdaResult {
  double value = 0.0;
  std::size_t masked = 0;
};

// Mean KL(sharpened teacher || student) over confidence-kept rows.
UdaResult uda_consistency(const Tensor& teacher_probs,
                          const Tensor& student_probs, const UdaConfig& cfg);

// ---- embedding-space attacks ----

enum class AttackMethod { None, Fgm, Pgd };
enum class NormScope { PerExample, PerBatch };

AttackMethod attack_from_name(const std::string& name);
const char* attack_name(AttackMethod m);

struct AttackConfig {
  AttackMethod method = AttackMethod::Fgm;
  double epsilon = 1e-2;
  double eta = 1e-2 / 3.0;  // PGD step size
  int k_steps = 3;          // PGD iterations
  double sigma2 = 1e-6;     // PGD init noise variance (epsilon/10 squared)
  NormScope scope = NormScope::PerExample;

  void validate() const;
};

// One normalized ascent direction of size epsilon. Vanishing gradient
// (norm < 1e-12) yields a zero perturbation for that scope unit.
Tensor fgm_perturb(const Tensor& g_x, double epsilon, NormScope scope);

using GradAtFn = std::function<Tensor(const Tensor& delta)>;

struct PgdTrace {
  std::vector<double> norms;  // perturbation norm after init and each step
  int steps_taken = 0;
};

// Projected gradient ascent inside the epsilon ball. grad_at must return
// d(loss)/d(delta) at the given perturbation.
Tensor pgd_perturb(const GradAtFn& grad_at, const AttackConfig& cfg,
                   const std::vector<std::size_t>& shape, std::uint64_t seed,
                   PgdTrace* trace = nullptr);

// Attack delta for a labeled batch under the given parameters. Dropout, when
// enabled, uses the same mask for every inner forward.
Tensor compute_attack_delta(const model::Params& params,
                            const model::Batch& batch,
                            const std::vector<int>& labels,
                            const AttackConfig& cfg,
                            const model::DropoutSpec& dropout,
                            std::uint64_t seed, PgdTrace* trace = nullptr);

// CE at the perturbed input point (delta computed per cfg, then frozen).
double adversarial_loss(const model::Params& params, const model::Batch& batch,
                        const std::vector<int>& labels, const AttackConfig& cfg,
                        const model::DropoutSpec& dropout, std::uint64_t seed);

// ---- contrastive loss ----

// Queue-extended InfoNCE. anchors/positives: B×P unit rows, queue: M×P,
// extra_negatives: H×P (may be empty). Row i's positive is positives[i];
// the denominator ranges over all positives, the queue, and the extras.
// Summation order inside the denominator is normalized (sorted), so any
// permutation of the queue gives the same value exactly.
double info_nce(const Tensor& anchors, const Tensor& positives,
                const Tensor& queue, const Tensor& extra_negatives, double tau);

// ---- combined objective ----

struct LossWeights {
  double lambda_unsup = 1.0;
  double alpha_adv = 1.0;
  double omega_joint = 0.5;
};

struct LossBreakdown {
  double l_sup = 0.0;
  double l_unsup = 0.0;
  double l_adv = 0.0;
  double l_con = 0.0;
  double l_uda = 0.0;
  double l_total = 0.0;
  std::size_t masked_consistency = 0;
  std::size_t kept_supervised = 0;
};

// l_uda = l_sup + lambda*l_unsup + alpha*l_adv;
// l_total = omega*l_uda + (1-omega)*l_con.
LossBreakdown combine(double l_sup, double l_unsup, double l_adv, double l_con,
                      const LossWeights& w);

// ---- tape-level builders (used by the trainer; mirror the value level) ----

// Mean CE over kept rows; a constant zero node when nothing is kept.
diff::Var ce_loss_node(diff::Tape& tape, diff::Var logits,
                       const std::vector<int>& labels,
                       const std::vector<bool>* keep = nullptr);
// Mean KL(target row || softmax(logits row)) over kept rows, including the
// constant teacher-entropy part.
diff::Var kl_loss_node(diff::Tape& tape, diff::Var logits,
                       const UdaTargets& targets);
// anchors and positives may both carry gradients (two student views);
// queue and extra negatives are detached values.
diff::Var info_nce_node(diff::Tape& tape, diff::Var anchors, diff::Var positives,
                        const Tensor& queue, const Tensor& extra_negatives,
                        double tau);

}  // namespace sslc::losses
