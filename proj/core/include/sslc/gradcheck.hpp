#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "sslc/losses.hpp"
#include "sslc/model.hpp"

namespace sslc::gradcheck {

enum class Objective { Supervised, Consistency, AdversarialFgm, Contrastive };

const char* objective_name(Objective o);

struct CheckConfig {
  std::size_t param_coords = 160;  // sampled parameter coordinates
  std::size_t input_coords = 60;   // sampled input-embedding coordinates
  double fd_step = 1e-5;
  // Self-test hook: scale the analytic gradient of one tensor so the check
  // must fail. Empty name disables it.
  std::string corrupt_tensor;
  double corrupt_factor = 2.0;
};

struct CheckReport {
  double max_rel_error = 0.0;
  std::size_t param_coords = 0;
  std::size_t input_coords = 0;
};

// Fixture for one objective: frozen side inputs so the loss is a
// deterministic function of the parameters (and an input offset).
struct Scenario {
  Objective objective = Objective::Supervised;
  std::vector<int> labels;
  losses::UdaTargets targets;
  model::Batch positive_batch;  // second contrastive view, also through θ
  Tensor queue;
  double tau = 0.05;
  Tensor attack_delta;  // frozen at the center parameters
};

Scenario make_scenario(Objective obj, const model::Params& params,
                       const model::Batch& batch, std::uint64_t seed);

// Loss value with parameters p; xi, when given, is added to the input
// embeddings (used to probe d(loss)/d(x)).
double scenario_value(const model::Params& p, const model::Batch& batch,
                      const Scenario& s, const Tensor* xi = nullptr);

// Analytic gradients at p via the recording tape (dropout off).
model::GradientSet scenario_gradient(const model::Params& p,
                                     const model::Batch& batch,
                                     const Scenario& s);

// Compares analytic gradients against central finite differences on a
// random coordinate subsample. Throws on non-finite gradients.
CheckReport grad_check(const model::Params& params, const model::Batch& batch,
                       Objective obj, std::uint64_t seed,
                       const CheckConfig& cfg = {});

double central_difference(const std::function<double(double)>& f, double x,
                          double h);
double relative_error(double analytic, double numeric);

}  // namespace sslc::gradcheck
