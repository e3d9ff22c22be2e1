#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "sslc/corpus.hpp"
#include "sslc/losses.hpp"
#include "sslc/model.hpp"
#include "sslc/tensor.hpp"

namespace sslc::eval {

struct ClassScores {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double micro_f1 = 0.0;
  std::vector<ClassScores> per_class;                // indexed by class
  std::vector<std::vector<std::size_t>> confusion;   // [true][pred]
  std::vector<double> level_accuracy;                // entry k-1 = level-k
  std::size_t sample_count = 0;

  std::string to_json(const corpus::LabelIndex& index) const;
  std::string to_table(const corpus::LabelIndex& index) const;
};

// Argmax class per sequence, dropout off, chunked batches. Chunks are
// independent so parallel execution cannot change the result.
std::vector<int> predict_classes(const model::Params& params,
                                 const std::vector<corpus::TokenSeq>& seqs,
                                 std::size_t chunk = 64);

MetricsReport classify_metrics(const std::vector<int>& preds,
                               const std::vector<int>& labels,
                               const corpus::LabelIndex& index);

enum class Defense { None, Fgm, Pgd };

Defense defense_from_name(const std::string& name);
const char* defense_name(Defense d);

struct AttackOutcome {
  losses::AttackMethod attack = losses::AttackMethod::Fgm;
  double epsilon = 0.0;
  int steps = 0;
  double robust_accuracy = 0.0;
};

struct RobustnessReport {
  Defense defense = Defense::None;
  double standard_accuracy = 0.0;
  std::size_t sample_count = 0;
  std::vector<std::size_t> sample_indices;  // same examples for SA and RA
  std::vector<AttackOutcome> attacks;       // counterpart attack(s)

  std::string to_json() const;
  std::string to_table() const;
};

struct RobustnessConfig {
  Defense defense = Defense::None;
  double epsilon = 2.57e-3;
  int steps = 10;            // PGD iteration count
  std::size_t sample = 1000; // 0 = whole test set
  std::uint64_t seed = 1;
};

// Cross-attack protocol: an FGM-defended model is attacked with PGD and
// vice versa; an undefended model is attacked with both. Attacks maximize
// the loss of the true label, one example at a time.
RobustnessReport robustness_eval(const model::Params& params,
                                 const std::vector<corpus::TokenSeq>& seqs,
                                 const std::vector<int>& labels,
                                 const RobustnessConfig& cfg);

enum class Projector { None, Pca2 };

// Deterministic 2-D PCA (Jacobi eigensolver, mean-centered; each component
// is oriented so its largest-magnitude entry is positive). Returns N×2.
Tensor pca2(const Tensor& points);

// CSV rows: id, true label, predicted label, pre-softmax logits, and with
// Projector::Pca2 two trailing projection coordinates.
void export_embeddings(const model::Params& params,
                       const std::vector<corpus::TokenSeq>& seqs,
                       const std::vector<std::string>& ids,
                       const std::vector<std::string>& true_labels,
                       const corpus::LabelIndex& index, Projector projector,
                       std::ostream& out);

}  // namespace sslc::eval
