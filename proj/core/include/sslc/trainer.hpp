#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sslc/augment.hpp"
#include "sslc/corpus.hpp"
#include "sslc/losses.hpp"
#include "sslc/model.hpp"
#include "sslc/tensor.hpp"
#include "sslc/util.hpp"

namespace sslc::train {

// Fixed-capacity FIFO of detached sentence embeddings.
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(std::size_t capacity, std::size_t width);

  // Appends rows in batch order, evicting oldest entries to keep
  // size <= capacity. Returns how many entries were evicted.
  std::size_t push(const Tensor& embeddings);
  Tensor contents() const;  // size×width, oldest first
  std::size_t size() const { return count_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t width() const { return width_; }
  std::uint64_t pushed_total() const { return pushed_total_; }

 private:
  std::size_t capacity_ = 0;
  std::size_t width_ = 0;
  std::vector<std::vector<double>> slots_;
  std::size_t head_ = 0;  // index of oldest entry
  std::size_t count_ = 0;
  std::uint64_t pushed_total_ = 0;
};

enum class OptKind { Adam, Sgd };

struct OptimizerConfig {
  OptKind kind = OptKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled from the gradient
};

class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(const OptimizerConfig& cfg, const model::Params& params);

  void step(model::Params& params,
            const std::map<std::string, Tensor>& grads);

  std::uint64_t steps_taken() const { return t_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }
  void restore(std::uint64_t t, std::map<std::string, Tensor> m,
               std::map<std::string, Tensor> v);
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

enum class UdaAugmentKind { Identity, Eda, Tfidf, BackTranslation };

struct UdaAugmentConfig {
  UdaAugmentKind kind = UdaAugmentKind::Identity;
  augment::EdaProbs eda{0.1, 0.1, 0.1};
  double tfidf_p = 0.15;
  std::string command;  // external back-translation hook; empty = lexicon
};

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t total_steps = 100;
  std::size_t eval_every = 0;        // 0 = never
  std::size_t checkpoint_every = 0;  // 0 = final only
  std::size_t teacher_refresh_every = 1;
  bool alternate = false;  // two sequential updates instead of one joint

  double lambda_unsup = 1.0;
  double alpha_adv = 1.0;
  double omega_joint = 0.5;
  double tau = 0.05;
  double gamma = 0.995;
  std::size_t queue_m = 160;
  double dup_rate = 0.32;

  losses::UdaConfig uda;
  losses::TsaSchedule tsa = losses::TsaSchedule::None;
  losses::AttackConfig attack;
  UdaAugmentConfig uda_augment;
  double neg_sim_threshold = 0.0;  // >0 enables EDA hard negatives
  augment::EdaProbs neg_eda{0.1, 0.1, 0.1};
  std::optional<std::string> lexicon_path;

  std::size_t batch_labeled = 24;
  std::size_t batch_uda = 24;
  std::size_t batch_contrastive = 24;
  std::size_t max_len = 128;
  std::size_t eval_sample = 0;  // 0 = whole test set

  OptimizerConfig optimizer;

  model::Arch arch = model::Arch::MeanPool;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t proj_dim = 32;
  double dropout_p = 0.1;

  void validate() const;
  static TrainConfig from_json(const std::string& text,
                               const std::string& where);
  static TrainConfig load(const std::string& path);
  std::string to_json() const;

  model::ModelConfig model_config(std::size_t vocab_size,
                                  std::size_t num_classes) const;
};

struct PoolPosition {
  std::uint64_t epoch = 0;
  std::size_t cursor = 0;
};

// Deterministic epoch-reshuffled index stream over one data pool. The order
// of each epoch is a pure function of (seed, tag, epoch), so a (epoch,
// cursor) pair fully captures the stream position.
class PoolCycler {
 public:
  PoolCycler(std::size_t pool_size, std::uint64_t seed, std::uint64_t tag,
             PoolPosition start = {});
  std::vector<std::size_t> take(std::size_t n);
  PoolPosition position() const { return pos_; }

 private:
  void reshuffle();
  std::size_t pool_size_;
  std::uint64_t seed_, tag_;
  PoolPosition pos_;
  std::vector<std::size_t> order_;
};

struct HistoryRow {
  std::uint64_t step = 0;
  losses::LossBreakdown losses;
  std::optional<double> eval_accuracy;
  std::optional<double> eval_micro_f1;
};

std::string history_row_json(const HistoryRow& row);

struct TrainState {
  TrainConfig config;
  model::Params theta;
  model::Params teacher;
  model::Params momentum;
  Optimizer optimizer;
  NegativeQueue queue;
  std::uint64_t step = 0;  // completed steps
  PoolPosition labeled_pos, uda_pos, con_pos;
  std::vector<std::string> class_labels;
  std::string vocab_hash;
  std::vector<HistoryRow> history;  // in-memory only, append-only
};

// Raised when a loss turns non-finite; carries the offending breakdown.
class DivergenceError : public Error {
 public:
  DivergenceError(std::uint64_t step, losses::LossBreakdown breakdown);
  const losses::LossBreakdown& breakdown() const { return breakdown_; }

 private:
  losses::LossBreakdown breakdown_;
};

// Per-step inputs. Branches disabled by the loss weights may leave their
// batches empty; active branches require them.
struct StepBatches {
  model::Batch labeled;
  std::vector<int> labels;
  model::Batch uda_clean;      // teacher input
  model::Batch uda_augmented;  // student input, augmented views
  model::Batch con_anchor;
  model::Batch con_view;       // word-repeated views
  model::Batch con_negatives;  // optional EDA hard negatives
};

losses::LossBreakdown train_step(TrainState& state, const StepBatches& batches);

TrainState init_state(const TrainConfig& config,
                      const corpus::Vocabulary& vocab,
                      const corpus::LabelIndex& labels);

struct RunOptions {
  std::string checkpoint_path;  // empty = no checkpoint files
  std::function<void(const std::string&)> history_line;  // JSONL sink
  std::function<void(const std::string&)> log;           // progress messages
};

struct RunResult {
  std::vector<HistoryRow> history;  // rows appended by this run
};

// Runs state forward to config.total_steps. Call with a fresh state or one
// restored from a checkpoint; determinism makes the two paths agree.
RunResult run_training(TrainState& state, const corpus::DatasetSplit& split,
                       const corpus::Vocabulary& vocab,
                       const RunOptions& options = {});

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

}  // namespace sslc::train
