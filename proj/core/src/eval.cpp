#include "sslc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "jsonio.hpp"
#include "sslc/rng.hpp"
#include "sslc/util.hpp"

namespace sslc::eval {

namespace {

constexpr std::uint64_t kStreamSample = 0x51;
constexpr std::uint64_t kStreamAttackFgm = 0x52;
constexpr std::uint64_t kStreamAttackPgd = 0x53;

using ojson = nlohmann::ordered_json;

int argmax_row(const Tensor& m, std::size_t row) {
  const std::size_t cols = m.shape[1];
  std::size_t best = 0;
  for (std::size_t j = 1; j < cols; ++j)
    if (m.at(row, j) > m.at(row, best)) best = j;
  return static_cast<int>(best);
}

std::string level_prefix(const std::string& path, std::size_t k) {
  const std::vector<std::string> parts = util::split(path, '/');
  const std::size_t n = std::min(k, parts.size());
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += '/';
    out += parts[i];
  }
  return out;
}

}  // namespace

std::vector<int> predict_classes(const model::Params& params,
                                 const std::vector<corpus::TokenSeq>& seqs,
                                 std::size_t chunk) {
  if (seqs.empty()) return {};
  if (chunk == 0) chunk = 1;
  std::vector<int> preds(seqs.size());
  const std::size_t nchunks = (seqs.size() + chunk - 1) / chunk;
  util::parallel_for(nchunks, [&](std::size_t ci) {
    const std::size_t lo = ci * chunk;
    const std::size_t hi = std::min(lo + chunk, seqs.size());
    model::Batch b;
    b.seqs.reserve(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) b.seqs.push_back(seqs[i].ids);
    auto [logits, trace] = model::forward_classify(params, b, {});
    for (std::size_t i = lo; i < hi; ++i)
      preds[i] = argmax_row(logits, i - lo);
  });
  return preds;
}

MetricsReport classify_metrics(const std::vector<int>& preds,
                               const std::vector<int>& labels,
                               const corpus::LabelIndex& index) {
  if (preds.size() != labels.size())
    throw Error("classify_metrics: length mismatch");
  if (preds.empty()) throw Error("classify_metrics: empty input");
  const std::size_t n = preds.size();
  const std::size_t c = index.num_classes();
  auto check = [&](int v) {
    if (v < 0 || static_cast<std::size_t>(v) >= c)
      throw Error("classify_metrics: class index out of range");
  };

  MetricsReport r;
  r.sample_count = n;
  r.per_class.resize(c);
  r.confusion.assign(c, std::vector<std::size_t>(c, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    check(preds[i]);
    check(labels[i]);
    const auto p = static_cast<std::size_t>(preds[i]);
    const auto t = static_cast<std::size_t>(labels[i]);
    ++r.confusion[t][p];
    if (p == t) {
      ++correct;
      ++r.per_class[t].tp;
    } else {
      ++r.per_class[p].fp;
      ++r.per_class[t].fn;
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  std::size_t tp_sum = 0, fp_sum = 0, fn_sum = 0;
  for (auto& s : r.per_class) {
    tp_sum += s.tp;
    fp_sum += s.fp;
    fn_sum += s.fn;
    s.precision = s.tp + s.fp ? static_cast<double>(s.tp) / (s.tp + s.fp) : 0.0;
    s.recall = s.tp + s.fn ? static_cast<double>(s.tp) / (s.tp + s.fn) : 0.0;
    s.f1 = s.precision + s.recall > 0.0
               ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
  }
  const double mp = tp_sum + fp_sum ? static_cast<double>(tp_sum) / (tp_sum + fp_sum) : 0.0;
  const double mr = tp_sum + fn_sum ? static_cast<double>(tp_sum) / (tp_sum + fn_sum) : 0.0;
  // The harmonic mean of equal values is that value; taking the shortcut
  // keeps micro f1 bitwise equal to accuracy in the single-label case,
  // where every error adds one false positive and one false negative.
  r.micro_f1 = mp == mr               ? mp
               : mp + mr > 0.0        ? 2.0 * mp * mr / (mp + mr)
                                      : 0.0;

  for (std::size_t k = 1; k <= index.max_depth(); ++k) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (level_prefix(index.label_of(static_cast<std::size_t>(preds[i])), k) ==
          level_prefix(index.label_of(static_cast<std::size_t>(labels[i])), k))
        ++ok;
    }
    r.level_accuracy.push_back(static_cast<double>(ok) / static_cast<double>(n));
  }
  return r;
}

std::string MetricsReport::to_json(const corpus::LabelIndex& index) const {
  ojson j;
  j["sample_count"] = sample_count;
  j["accuracy"] = accuracy;
  j["micro_f1"] = micro_f1;
  ojson classes = ojson::array();
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    const ClassScores& s = per_class[k];
    classes.push_back({{"label", index.label_of(k)},
                       {"precision", s.precision},
                       {"recall", s.recall},
                       {"f1", s.f1},
                       {"tp", s.tp},
                       {"fp", s.fp},
                       {"fn", s.fn}});
  }
  j["per_class"] = std::move(classes);
  j["level_accuracy"] = level_accuracy;
  j["confusion"] = confusion;
  return j.dump(2);
}

std::string MetricsReport::to_table(const corpus::LabelIndex& index) const {
  std::size_t w = 8;
  for (std::size_t k = 0; k < per_class.size(); ++k)
    w = std::max(w, index.label_of(k).size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w) + 2) << "label"
     << std::setw(11) << "precision" << std::setw(11) << "recall"
     << std::setw(11) << "f1" << "\n";
  os << std::fixed << std::setprecision(4);
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    const ClassScores& s = per_class[k];
    os << std::setw(static_cast<int>(w) + 2) << index.label_of(k)
       << std::setw(11) << s.precision << std::setw(11) << s.recall
       << std::setw(11) << s.f1 << "\n";
  }
  os << std::setw(static_cast<int>(w) + 2) << "accuracy" << accuracy << "\n";
  os << std::setw(static_cast<int>(w) + 2) << "micro_f1" << micro_f1 << "\n";
  for (std::size_t k = 0; k < level_accuracy.size(); ++k) {
    os << std::setw(static_cast<int>(w) + 2)
       << ("level_" + std::to_string(k + 1)) << level_accuracy[k] << "\n";
  }
  os << "samples: " << sample_count << "\n";
  return os.str();
}

Defense defense_from_name(const std::string& name) {
  if (name == "none") return Defense::None;
  if (name == "fgm") return Defense::Fgm;
  if (name == "pgd") return Defense::Pgd;
  throw ConfigError("defense: unknown name '" + name + "'");
}

const char* defense_name(Defense d) {
  switch (d) {
    case Defense::None: return "none";
    case Defense::Fgm: return "fgm";
    default: return "pgd";
  }
}

RobustnessReport robustness_eval(const model::Params& params,
                                 const std::vector<corpus::TokenSeq>& seqs,
                                 const std::vector<int>& labels,
                                 const RobustnessConfig& cfg) {
  if (seqs.size() != labels.size())
    throw Error("robustness_eval: length mismatch");
  if (seqs.empty()) throw Error("robustness_eval: empty test set");
  if (!(cfg.epsilon >= 0.0))
    throw ConfigError("robustness_eval: epsilon must be >= 0");
  if (cfg.steps < 1) throw ConfigError("robustness_eval: steps must be >= 1");
  for (const auto& [name, t] : params.tensors) {
    if (!t.all_finite())
      throw Error("robustness_eval: non-finite parameter " + name);
  }

  std::vector<std::size_t> idx(seqs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (cfg.sample > 0 && cfg.sample < idx.size()) {
    Rng r(derive_seed(cfg.seed, kStreamSample, 0));
    idx = r.sample_indices(idx.size(), cfg.sample);
  }

  RobustnessReport rep;
  rep.defense = cfg.defense;
  rep.sample_indices = idx;
  rep.sample_count = idx.size();

  std::vector<corpus::TokenSeq> sample;
  sample.reserve(idx.size());
  for (std::size_t i : idx) sample.push_back(seqs[i]);
  const std::vector<int> clean = predict_classes(params, sample);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < idx.size(); ++i)
    if (clean[i] == labels[idx[i]]) ++correct;
  rep.standard_accuracy =
      static_cast<double>(correct) / static_cast<double>(idx.size());

  std::vector<losses::AttackMethod> attacks;
  switch (cfg.defense) {
    case Defense::None:
      attacks = {losses::AttackMethod::Fgm, losses::AttackMethod::Pgd};
      break;
    case Defense::Fgm:
      attacks = {losses::AttackMethod::Pgd};
      break;
    case Defense::Pgd:
      attacks = {losses::AttackMethod::Fgm};
      break;
  }

  for (losses::AttackMethod method : attacks) {
    losses::AttackConfig acfg;
    acfg.method = method;
    acfg.epsilon = cfg.epsilon;
    acfg.k_steps = cfg.steps;
    acfg.eta = 2.5 * cfg.epsilon / static_cast<double>(cfg.steps);
    acfg.sigma2 = (cfg.epsilon / 10.0) * (cfg.epsilon / 10.0);
    acfg.scope = losses::NormScope::PerExample;
    const std::uint64_t tag = method == losses::AttackMethod::Fgm
                                  ? kStreamAttackFgm
                                  : kStreamAttackPgd;
    std::vector<int> attacked(idx.size());
    util::parallel_for(idx.size(), [&](std::size_t i) {
      model::Batch b;
      b.seqs.push_back(seqs[idx[i]].ids);
      const std::vector<int> y{labels[idx[i]]};
      const Tensor delta = losses::compute_attack_delta(
          params, b, y, acfg, model::DropoutSpec{},
          derive_seed(cfg.seed, tag, idx[i]));
      auto [logits, trace] = model::forward_classify(params, b, {}, &delta);
      attacked[i] = argmax_row(logits, 0);
    });
    std::size_t ok = 0;
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (attacked[i] == labels[idx[i]]) ++ok;
    AttackOutcome out;
    out.attack = method;
    out.epsilon = cfg.epsilon;
    out.steps = method == losses::AttackMethod::Pgd ? cfg.steps : 1;
    out.robust_accuracy =
        static_cast<double>(ok) / static_cast<double>(idx.size());
    rep.attacks.push_back(out);
  }
  return rep;
}

std::string RobustnessReport::to_json() const {
  ojson j;
  j["defense"] = defense_name(defense);
  j["sample_count"] = sample_count;
  j["standard_accuracy"] = standard_accuracy;
  ojson arr = ojson::array();
  for (const AttackOutcome& a : attacks) {
    arr.push_back({{"attack", losses::attack_name(a.attack)},
                   {"epsilon", a.epsilon},
                   {"steps", a.steps},
                   {"robust_accuracy", a.robust_accuracy}});
  }
  j["attacks"] = std::move(arr);
  return j.dump(2);
}

std::string RobustnessReport::to_table() const {
  std::ostringstream os;
  os << "defense: " << defense_name(defense) << "  samples: " << sample_count
     << "\n";
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(10) << "metric" << std::setw(8) << "attack"
     << std::setw(12) << "epsilon" << std::setw(7) << "steps" << "accuracy\n";
  os << std::setw(10) << "SA" << std::setw(8) << "-" << std::setw(12) << "-"
     << std::setw(7) << "-" << standard_accuracy << "\n";
  for (const AttackOutcome& a : attacks) {
    os << std::setw(10) << "RA" << std::setw(8) << losses::attack_name(a.attack)
       << std::setw(12) << util::format_sig9(a.epsilon) << std::setw(7)
       << a.steps << a.robust_accuracy << "\n";
  }
  return os.str();
}

namespace {

// Cyclic Jacobi sweeps on a symmetric matrix; returns eigenvalues in place
// and accumulates rotations into v (columns are eigenvectors).
void jacobi_eigen(std::vector<std::vector<double>>& a,
                  std::vector<std::vector<double>>& v) {
  const std::size_t d = a.size();
  v.assign(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
}

}  // namespace

Tensor pca2(const Tensor& points) {
  if (points.rank() != 2) throw Error("pca2: expected a 2-d tensor");
  const std::size_t n = points.shape[0];
  const std::size_t d = points.shape[1];
  if (n == 0 || d == 0) throw Error("pca2: empty input");

  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += points.at(i, j);
  for (double& m : mean) m /= static_cast<double>(n);

  Tensor centered = points;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered.at(i, j) -= mean[j];

  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p; q < d; ++q)
        cov[p][q] += centered.at(i, p) * centered.at(i, q) / denom;
  for (std::size_t p = 0; p < d; ++p)
    for (std::size_t q = 0; q < p; ++q) cov[p][q] = cov[q][p];

  std::vector<std::vector<double>> vecs;
  jacobi_eigen(cov, vecs);
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return cov[a][a] > cov[b][b];
  });

  Tensor out = Tensor::zeros({n, 2});
  for (std::size_t comp = 0; comp < 2 && comp < d; ++comp) {
    const std::size_t col = order[comp];
    std::vector<double> axis(d);
    for (std::size_t j = 0; j < d; ++j) axis[j] = vecs[j][col];
    std::size_t imax = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(axis[j]) > std::abs(axis[imax])) imax = j;
    if (axis[imax] < 0.0)
      for (double& x : axis) x = -x;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += centered.at(i, j) * axis[j];
      out.at(i, comp) = dot;
    }
  }
  return out;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

}  // namespace

void export_embeddings(const model::Params& params,
                       const std::vector<corpus::TokenSeq>& seqs,
                       const std::vector<std::string>& ids,
                       const std::vector<std::string>& true_labels,
                       const corpus::LabelIndex& index, Projector projector,
                       std::ostream& out) {
  if (seqs.empty()) throw Error("export_embeddings: empty dataset");
  if (ids.size() != seqs.size() || true_labels.size() != seqs.size())
    throw Error("export_embeddings: length mismatch");
  const std::size_t n = seqs.size();
  const std::size_t c = params.config.num_classes;
  if (index.num_classes() != c)
    throw Error("export_embeddings: label index size mismatch");

  Tensor logits = Tensor::zeros({n, c});
  std::vector<int> preds(n);
  const std::size_t chunk = 64;
  const std::size_t nchunks = (n + chunk - 1) / chunk;
  util::parallel_for(nchunks, [&](std::size_t ci) {
    const std::size_t lo = ci * chunk;
    const std::size_t hi = std::min(lo + chunk, n);
    model::Batch b;
    for (std::size_t i = lo; i < hi; ++i) b.seqs.push_back(seqs[i].ids);
    auto [part, trace] = model::forward_classify(params, b, {});
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t j = 0; j < c; ++j) logits.at(i, j) = part.at(i - lo, j);
      preds[i] = argmax_row(part, i - lo);
    }
  });

  Tensor coords;
  if (projector == Projector::Pca2) coords = pca2(logits);

  out << "id,true,pred";
  for (std::size_t j = 0; j < c; ++j) out << ",logit_" << j;
  if (projector == Projector::Pca2) out << ",pca_x,pca_y";
  out << "\n";
  for (std::size_t i = 0; i < n; ++i) {
    out << csv_field(ids[i]) << ',' << csv_field(true_labels[i]) << ','
        << csv_field(index.label_of(static_cast<std::size_t>(preds[i])));
    for (std::size_t j = 0; j < c; ++j)
      out << ',' << util::format_sig9(logits.at(i, j));
    if (projector == Projector::Pca2) {
      out << ',' << util::format_sig9(coords.at(i, 0)) << ','
          << util::format_sig9(coords.at(i, 1));
    }
    out << "\n";
  }
}

}  // namespace sslc::eval
