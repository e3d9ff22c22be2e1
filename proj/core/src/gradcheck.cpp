#include "sslc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "sslc/rng.hpp"
#include "sslc/util.hpp"

namespace sslc::gradcheck {

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::Supervised: return "supervised";
    case Objective::Consistency: return "consistency";
    case Objective::AdversarialFgm: return "adversarial_fgm";
    default: return "contrastive";
  }
}

namespace {

Tensor random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = Tensor::zeros({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      t.at(i, j) = rng.normal(0.0, 1.0);
      norm += t.at(i, j) * t.at(i, j);
    }
    norm = std::max(std::sqrt(norm), 1e-12);
    for (std::size_t j = 0; j < cols; ++j) t.at(i, j) /= norm;
  }
  return t;
}

}  // namespace

Scenario make_scenario(Objective obj, const model::Params& params,
                       const model::Batch& batch, std::uint64_t seed) {
  Scenario s;
  s.objective = obj;
  const std::size_t b = batch.size();
  const std::size_t c = params.config.num_classes;
  Rng rng(derive_seed(seed, 0x6c5, 0));
  switch (obj) {
    case Objective::Supervised:
    case Objective::AdversarialFgm: {
      s.labels.resize(b);
      for (auto& l : s.labels)
        l = static_cast<int>(
            rng.uniform_int(0, static_cast<std::int64_t>(c) - 1));
      if (obj == Objective::AdversarialFgm) {
        losses::AttackConfig atk;
        atk.method = losses::AttackMethod::Fgm;
        atk.epsilon = 0.05;
        s.attack_delta = losses::compute_attack_delta(
            params, batch, s.labels, atk, model::DropoutSpec{}, seed);
      }
      break;
    }
    case Objective::Consistency: {
      // Peaked random teacher rows so the confidence gate keeps some rows
      // and drops others; sharpening at T != 1 is exercised too.
      Tensor logits = Tensor::zeros({b, c});
      for (double& v : logits.data) v = rng.normal(0.0, 2.5);
      losses::UdaConfig ucfg;
      ucfg.confidence_beta = 0.6;
      ucfg.sharpen_temperature = 0.5;
      s.targets = losses::uda_targets(losses::softmax_rows(logits), ucfg);
      break;
    }
    case Objective::Contrastive: {
      // Positive views through the same parameters: word-repetition-like
      // variant so both sides of the loss carry gradients.
      s.positive_batch = batch;
      for (auto& seq : s.positive_batch.seqs) {
        const int first = seq.front();
        seq.insert(seq.begin() + 1, first);
      }
      s.queue = random_unit_rows(6, params.config.proj_dim, rng);
      break;
    }
  }
  return s;
}

double scenario_value(const model::Params& p, const model::Batch& batch,
                      const Scenario& s, const Tensor* xi) {
  const model::DropoutSpec off{};
  switch (s.objective) {
    case Objective::Supervised: {
      auto [logits, trace] = model::forward_classify(p, batch, off, xi);
      return losses::cross_entropy(logits, s.labels);
    }
    case Objective::Consistency: {
      auto [logits, trace] = model::forward_classify(p, batch, off, xi);
      const Tensor probs = losses::softmax_rows(logits);
      const std::size_t c = probs.shape[1];
      double sum = 0.0;
      std::size_t kept = 0;
      for (std::size_t i = 0; i < probs.shape[0]; ++i) {
        if (!s.targets.keep[i]) continue;
        std::vector<double> t(c), q(c);
        for (std::size_t j = 0; j < c; ++j) {
          t[j] = s.targets.teacher.at(i, j);
          q[j] = probs.at(i, j);
        }
        sum += losses::kl_divergence(t, q);
        ++kept;
      }
      return kept == 0 ? 0.0 : sum / static_cast<double>(kept);
    }
    case Objective::AdversarialFgm: {
      Tensor delta = s.attack_delta;
      if (xi != nullptr) {
        if (xi->shape != delta.shape) throw Error("grad_check: xi shape");
        for (std::size_t i = 0; i < delta.data.size(); ++i)
          delta.data[i] += xi->data[i];
      }
      auto [logits, trace] = model::forward_classify(p, batch, off, &delta);
      return losses::cross_entropy(logits, s.labels);
    }
    default: {
      auto [emb, trace] = model::forward_embed(p, batch, off, xi);
      auto [pos, ptrace] = model::forward_embed(p, s.positive_batch, off);
      return losses::info_nce(emb, pos, s.queue, Tensor{}, s.tau);
    }
  }
}

model::GradientSet scenario_gradient(const model::Params& p,
                                     const model::Batch& batch,
                                     const Scenario& s) {
  diff::Tape tape;
  model::TapeModel tm(tape, p);
  const model::DropoutSpec off{};
  diff::Var loss;
  diff::Var x_input;
  if (s.objective == Objective::Contrastive) {
    model::TapeModel::Forward f = tm.embed(batch, off);
    model::TapeModel::Forward fp = tm.embed(s.positive_batch, off);
    x_input = f.x_input;
    loss = losses::info_nce_node(tape, f.out, fp.out, s.queue, Tensor{}, s.tau);
  } else {
    diff::Var delta{};
    if (s.objective == Objective::AdversarialFgm)
      delta = tape.constant(s.attack_delta);
    model::TapeModel::Forward f = tm.classify(batch, off, delta);
    x_input = f.x_input;
    if (s.objective == Objective::Consistency)
      loss = losses::kl_loss_node(tape, f.out, s.targets);
    else
      loss = losses::ce_loss_node(tape, f.out, s.labels);
  }
  tape.backward(loss);
  model::GradientSet g;
  for (const auto& [name, var] : tm.leaves())
    g.params.emplace(name, tape.gradient(var));
  g.g_x = tape.gradient(x_input);
  return g;
}

double central_difference(const std::function<double(double)>& f, double x,
                          double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

CheckReport grad_check(const model::Params& params, const model::Batch& batch,
                       Objective obj, std::uint64_t seed,
                       const CheckConfig& cfg) {
  const Scenario s = make_scenario(obj, params, batch, seed);
  model::GradientSet analytic = scenario_gradient(params, batch, s);
  for (const auto& [name, g] : analytic.params)
    if (!g.all_finite())
      throw Error("grad_check: non-finite gradient in " + name);
  if (!analytic.g_x.all_finite())
    throw Error("grad_check: non-finite input gradient");
  if (!cfg.corrupt_tensor.empty()) {
    auto it = analytic.params.find(cfg.corrupt_tensor);
    if (it == analytic.params.end())
      throw Error("grad_check: unknown tensor " + cfg.corrupt_tensor);
    for (double& v : it->second.data) v *= cfg.corrupt_factor;
  }

  // Coordinate pool: every non-embedding scalar, plus embedding rows of
  // tokens actually present (absent rows have trivially zero gradients).
  std::vector<std::pair<std::string, std::size_t>> pool;
  std::vector<bool> present(params.config.vocab_size, false);
  for (const auto& seq : batch.seqs)
    for (int id : seq) present[static_cast<std::size_t>(id)] = true;
  for (const auto& [name, t] : params.tensors) {
    if (name == "embed") {
      const std::size_t d = params.config.embed_dim;
      for (std::size_t r = 0; r < params.config.vocab_size; ++r) {
        if (!present[r]) continue;
        for (std::size_t k = 0; k < d; ++k) pool.emplace_back(name, r * d + k);
      }
    } else {
      for (std::size_t i = 0; i < t.data.size(); ++i) pool.emplace_back(name, i);
    }
  }

  // Input coordinates restricted to real (non-PAD) positions.
  const std::size_t l = std::max<std::size_t>(batch.max_len(), 1);
  const std::size_t d = params.config.embed_dim;
  std::vector<std::size_t> input_pool;
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t j = 0; j < batch.seqs[i].size(); ++j)
      for (std::size_t k = 0; k < d; ++k)
        input_pool.push_back((i * l + j) * d + k);

  Rng rng(derive_seed(seed, 0x6c6, 0));
  rng.shuffle(pool);
  rng.shuffle(input_pool);
  const std::size_t np = std::min(cfg.param_coords, pool.size());
  const std::size_t ni = std::min(cfg.input_coords, input_pool.size());

  CheckReport report;
  model::Params work = params;
  for (std::size_t i = 0; i < np; ++i) {
    const auto& [name, idx] = pool[i];
    double& slot = work.at(name).data[idx];
    const double center = slot;
    slot = center + cfg.fd_step;
    const double up = scenario_value(work, batch, s);
    slot = center - cfg.fd_step;
    const double down = scenario_value(work, batch, s);
    slot = center;
    const double numeric = (up - down) / (2.0 * cfg.fd_step);
    const double a = analytic.params.at(name).data[idx];
    report.max_rel_error = std::max(report.max_rel_error, relative_error(a, numeric));
    ++report.param_coords;
  }
  Tensor xi = Tensor::zeros({batch.size(), l, d});
  for (std::size_t i = 0; i < ni; ++i) {
    const std::size_t idx = input_pool[i];
    xi.data[idx] = cfg.fd_step;
    const double up = scenario_value(params, batch, s, &xi);
    xi.data[idx] = -cfg.fd_step;
    const double down = scenario_value(params, batch, s, &xi);
    xi.data[idx] = 0.0;
    const double numeric = (up - down) / (2.0 * cfg.fd_step);
    const double a = analytic.g_x.data[idx];
    report.max_rel_error = std::max(report.max_rel_error, relative_error(a, numeric));
    ++report.input_coords;
  }
  return report;
}

}  // namespace sslc::gradcheck
