#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sslc/corpus.hpp"
#include "sslc/tape.hpp"
#include "sslc/tensor.hpp"

namespace sslc::model {

enum class Arch { MeanPool, TinyAttention };

enum class Role { Student, Teacher, Momentum };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& name);
const char* role_name(Role r);

struct ModelConfig {
  Arch arch = Arch::MeanPool;
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t proj_dim = 32;
  std::size_t num_classes = 0;
  double dropout_p = 0.1;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Named parameter set. `version` increments on every mutation so recorded
// forward traces can detect staleness.
struct Params {
  ModelConfig config;
  Role role = Role::Student;
  std::map<std::string, Tensor> tensors;
  std::uint64_t version = 0;

  static Params init(const ModelConfig& cfg, std::uint64_t seed,
                     Role role = Role::Student);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  void bump() { ++version; }
  std::size_t scalar_count() const;
};

// Deep copy with a new role tag (teacher refresh, momentum init).
Params snapshot(const Params& source, Role role);

// momentum <- gamma * momentum + (1 - gamma) * student, elementwise.
void momentum_update(Params& momentum, const Params& student, double gamma);

// Token-id sequences; padding happens at forward time.
struct Batch {
  std::vector<std::vector<int>> seqs;

  static Batch from_token_seqs(const std::vector<corpus::TokenSeq>& seqs);
  std::size_t size() const { return seqs.size(); }
  std::size_t max_len() const;
};

struct DropoutSpec {
  bool enabled = false;
  std::uint64_t seed = 0;
};

// Records one or more forwards of the same parameter set on one tape.
// Gradients from all heads accumulate into the shared parameter leaves.
class TapeModel {
 public:
  TapeModel(diff::Tape& tape, const Params& params);

  struct Forward {
    diff::Var out;      // logits B×C (classify) or unit rows B×proj (embed)
    diff::Var x_input;  // embedding-space input point, B×L×d
    Tensor valid;       // B×L in {0,1}
    std::size_t padded_len = 0;
  };

  // delta, when valid, is added to the gathered embeddings before anything
  // else; it must have shape B×L_padded×d for this batch.
  Forward classify(const Batch& batch, const DropoutSpec& dropout,
                   diff::Var delta = {});
  Forward embed(const Batch& batch, const DropoutSpec& dropout,
                diff::Var delta = {});

  diff::Tape& tape() { return *tape_; }
  const std::map<std::string, diff::Var>& leaves() const { return leaves_; }
  std::size_t padded_len_for(const Batch& batch) const;

 private:
  struct Trunk {
    diff::Var pooled;  // B×d after encoder body
    diff::Var x_input;
    Tensor valid;
    std::size_t padded_len;
  };
  Trunk run_trunk(const Batch& batch, const DropoutSpec& dropout,
                  diff::Var delta);

  diff::Tape* tape_;
  const Params* params_;
  std::map<std::string, diff::Var> leaves_;
};

// Self-contained recording of one forward pass, for the standalone API.
struct ForwardTrace {
  std::unique_ptr<diff::Tape> tape;
  diff::Var out;
  diff::Var x_input;
  std::map<std::string, diff::Var> leaves;
  const Params* params = nullptr;
  std::uint64_t params_version = 0;
  bool consumed = false;

  const Tensor& output() const { return tape->value(out); }
};

struct GradientSet {
  std::map<std::string, Tensor> params;  // same keys as Params::tensors
  Tensor g_x;                            // gradient at the input embeddings
};

std::pair<Tensor, ForwardTrace> forward_classify(const Params& params,
                                                 const Batch& batch,
                                                 const DropoutSpec& dropout,
                                                 const Tensor* delta = nullptr);
std::pair<Tensor, ForwardTrace> forward_embed(const Params& params,
                                              const Batch& batch,
                                              const DropoutSpec& dropout,
                                              const Tensor* delta = nullptr);

// upstream has the shape of the trace output. Throws if the parameters
// changed since the forward or if the trace was already consumed.
GradientSet backward(ForwardTrace& trace, const Tensor& upstream);

}  // namespace sslc::model
