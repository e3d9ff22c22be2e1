#include "sslc/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>

#include "sslc/util.hpp"

namespace sslc::diff {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw Error(std::string("tape: ") + what);
}

}  // namespace

Tape::Node& Tape::node(Var v) {
  require(v.index >= 0 && static_cast<std::size_t>(v.index) < nodes_.size(),
          "invalid var");
  return nodes_[static_cast<std::size_t>(v.index)];
}

const Tape::Node& Tape::node(Var v) const {
  require(v.index >= 0 && static_cast<std::size_t>(v.index) < nodes_.size(),
          "invalid var");
  return nodes_[static_cast<std::size_t>(v.index)];
}

Var Tape::push(Tensor value, bool requires_grad,
               std::function<void(Tape&, const Tensor&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, {}); }

Var Tape::leaf(Tensor value) { return push(std::move(value), true, {}); }

Tensor Tape::gradient(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  Tensor g;
  g.shape = n.value.shape;
  g.data.assign(n.value.data.size(), 0.0);
  return g;
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  require(g.shape == n.value.shape, "gradient shape mismatch");
  if (!n.has_grad) {
    n.grad.shape = n.value.shape;
    n.grad.data.assign(n.value.data.size(), 0.0);
    n.has_grad = true;
  }
  for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
}

void Tape::add_into(Var v, std::size_t offset, const double* g,
                    std::size_t n_vals) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad.shape = n.value.shape;
    n.grad.data.assign(n.value.data.size(), 0.0);
    n.has_grad = true;
  }
  require(offset + n_vals <= n.grad.data.size(), "gradient slice out of range");
  for (std::size_t i = 0; i < n_vals; ++i) n.grad.data[offset + i] += g[i];
}

void Tape::backward(Var loss) {
  require(node(loss).value.data.size() == 1, "backward target must be scalar");
  Tensor seed;
  seed.shape = node(loss).value.shape;
  seed.data.assign(1, 1.0);
  backward(loss, seed);
}

void Tape::backward(Var out, const Tensor& upstream) {
  require(!backward_done_, "backward already run on this tape");
  backward_done_ = true;
  Node& target = node(out);
  require(upstream.shape == target.value.shape, "upstream shape mismatch");
  target.grad = upstream;
  target.has_grad = true;
  for (std::int32_t i = out.index; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.has_grad && n.back) n.back(*this, n.grad);
  }
}

Var Tape::gather_rows(Var table, const std::vector<int>& ids, std::size_t b,
                      std::size_t l) {
  const Tensor& t = value(table);
  require(t.shape.size() == 2, "gather_rows: table must be rank 2");
  require(ids.size() == b * l, "gather_rows: ids size mismatch");
  const std::size_t v = t.shape[0];
  const std::size_t d = t.shape[1];
  Tensor out;
  out.shape = {b, l, d};
  out.data.resize(b * l * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const int id = ids[r];
    require(id >= 0 && static_cast<std::size_t>(id) < v,
            "gather_rows: id out of range");
    std::copy_n(t.data.data() + static_cast<std::size_t>(id) * d, d,
                out.data.data() + r * d);
  }
  const bool rg = node(table).requires_grad;
  auto back = [table, ids, d](Tape& tp, const Tensor& g) {
    for (std::size_t r = 0; r < ids.size(); ++r) {
      tp.add_into(table, static_cast<std::size_t>(ids[r]) * d, g.data.data() + r * d,
                  d);
    }
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape == tb.shape, "add: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  auto back = [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::sub(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape == tb.shape, "sub: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  auto back = [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    Tensor neg = g;
    for (double& x : neg.data) x = -x;
    tp.accumulate(b, neg);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::mul_const(Var a, Tensor mask) {
  const Tensor& ta = value(a);
  require(ta.shape == mask.shape, "mul_const: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask.data[i];
  const bool rg = node(a).requires_grad;
  auto back = [a, mask](Tape& tp, const Tensor& g) {
    Tensor gm = g;
    for (std::size_t i = 0; i < gm.data.size(); ++i) gm.data[i] *= mask.data[i];
    tp.accumulate(a, gm);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::scale(Var a, double c) {
  Tensor out = value(a);
  for (double& x : out.data) x *= c;
  const bool rg = node(a).requires_grad;
  auto back = [a, c](Tape& tp, const Tensor& g) {
    Tensor gs = g;
    for (double& x : gs.data) x *= c;
    tp.accumulate(a, gs);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::add_const_scalar(Var a, double c) {
  const Tensor& ta = value(a);
  require(ta.data.size() == 1, "add_const_scalar: input must be scalar");
  Tensor out = ta;
  out.data[0] += c;
  const bool rg = node(a).requires_grad;
  auto back = [a](Tape& tp, const Tensor& g) { tp.accumulate(a, g); };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::masked_mean_rows(Var x, Tensor valid) {
  const Tensor& tx = value(x);
  require(tx.shape.size() == 3, "masked_mean_rows: input must be rank 3");
  const std::size_t b = tx.shape[0];
  const std::size_t l = tx.shape[1];
  const std::size_t d = tx.shape[2];
  require(valid.shape == std::vector<std::size_t>({b, l}),
          "masked_mean_rows: mask shape mismatch");
  std::vector<double> counts(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < l; ++j) counts[i] += valid.at(i, j);
    require(counts[i] > 0.0, "masked_mean_rows: empty example");
  }
  Tensor out;
  out.shape = {b, d};
  out.data.assign(b * d, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < l; ++j) {
      const double v = valid.at(i, j);
      if (v == 0.0) continue;
      const double* row = tx.data.data() + (i * l + j) * d;
      double* o = out.data.data() + i * d;
      for (std::size_t k = 0; k < d; ++k) o[k] += v * row[k];
    }
    for (std::size_t k = 0; k < d; ++k) out.data[i * d + k] /= counts[i];
  }
  const bool rg = node(x).requires_grad;
  auto back = [x, valid, counts, l, d](Tape& tp, const Tensor& g) {
    const std::size_t b = counts.size();
    Tensor gx;
    gx.shape = {b, l, d};
    gx.data.assign(b * l * d, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < l; ++j) {
        const double v = valid.at(i, j);
        if (v == 0.0) continue;
        const double w = v / counts[i];
        double* row = gx.data.data() + (i * l + j) * d;
        const double* go = g.data.data() + i * d;
        for (std::size_t k = 0; k < d; ++k) row[k] = w * go[k];
      }
    }
    tp.accumulate(x, gx);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::matmul(Var a, Var w) {
  const Tensor& ta = value(a);
  const Tensor& tw = value(w);
  require(ta.shape.size() == 2 && tw.shape.size() == 2, "matmul: rank 2 required");
  require(ta.shape[1] == tw.shape[0], "matmul: inner dim mismatch");
  const std::size_t b = ta.shape[0];
  const std::size_t k = ta.shape[1];
  const std::size_t n = tw.shape[1];
  Tensor out;
  out.shape = {b, n};
  out.data.assign(b * n, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta.at(i, p);
      if (av == 0.0) continue;
      const double* wr = tw.data.data() + p * n;
      double* o = out.data.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * wr[j];
    }
  }
  const bool rg = node(a).requires_grad || node(w).requires_grad;
  auto back = [a, w, b, k, n](Tape& tp, const Tensor& g) {
    const Tensor& ta = tp.value(a);
    const Tensor& tw = tp.value(w);
    if (tp.node(a).requires_grad) {
      Tensor ga;
      ga.shape = {b, k};
      ga.data.assign(b * k, 0.0);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* gr = g.data.data() + i * n;
          const double* wr = tw.data.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) s += gr[j] * wr[j];
          ga.data[i * k + p] = s;
        }
      }
      tp.accumulate(a, ga);
    }
    if (tp.node(w).requires_grad) {
      Tensor gw;
      gw.shape = {k, n};
      gw.data.assign(k * n, 0.0);
      for (std::size_t i = 0; i < b; ++i) {
        const double* gr = g.data.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ta.at(i, p);
          if (av == 0.0) continue;
          double* o = gw.data.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) o[j] += av * gr[j];
        }
      }
      tp.accumulate(w, gw);
    }
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape.size() == 2 && tb.shape.size() == 2,
          "matmul_nt: rank 2 required");
  require(ta.shape[1] == tb.shape[1], "matmul_nt: inner dim mismatch");
  const std::size_t rows = ta.shape[0];
  const std::size_t k = ta.shape[1];
  const std::size_t m = tb.shape[0];
  Tensor out;
  out.shape = {rows, m};
  out.data.assign(rows * m, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* ar = ta.data.data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* br = tb.data.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out.data[i * m + j] = s;
    }
  }
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  auto back = [a, b, rows, k, m](Tape& tp, const Tensor& g) {
    const Tensor& ta = tp.value(a);
    const Tensor& tb = tp.value(b);
    if (tp.node(a).requires_grad) {
      Tensor ga;
      ga.shape = {rows, k};
      ga.data.assign(rows * k, 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        double* o = ga.data.data() + i * k;
        const double* gr = g.data.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) {
          const double gv = gr[j];
          if (gv == 0.0) continue;
          const double* br = tb.data.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) o[p] += gv * br[p];
        }
      }
      tp.accumulate(a, ga);
    }
    if (tp.node(b).requires_grad) {
      Tensor gb;
      gb.shape = {m, k};
      gb.data.assign(m * k, 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* ar = ta.data.data() + i * k;
        const double* gr = g.data.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) {
          const double gv = gr[j];
          if (gv == 0.0) continue;
          double* o = gb.data.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) o[p] += gv * ar[p];
        }
      }
      tp.accumulate(b, gb);
    }
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::add_row_bias(Var x, Var bias) {
  const Tensor& tx = value(x);
  const Tensor& tb = value(bias);
  require(tx.shape.size() == 2 && tb.shape.size() == 1,
          "add_row_bias: rank mismatch");
  require(tx.shape[1] == tb.shape[0], "add_row_bias: width mismatch");
  const std::size_t rows = tx.shape[0];
  const std::size_t n = tx.shape[1];
  Tensor out = tx;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += tb.data[j];
  const bool rg = node(x).requires_grad || node(bias).requires_grad;
  auto back = [x, bias, rows, n](Tape& tp, const Tensor& g) {
    tp.accumulate(x, g);
    if (tp.node(bias).requires_grad) {
      Tensor gb;
      gb.shape = {n};
      gb.data.assign(n, 0.0);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) gb.data[j] += g.data[i * n + j];
      tp.accumulate(bias, gb);
    }
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::tanh_elem(Var x) {
  Tensor out = value(x);
  for (double& v : out.data) v = std::tanh(v);
  const bool rg = node(x).requires_grad;
  const Tensor& stored = out;
  auto back = [x, y = stored](Tape& tp, const Tensor& g) {
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.data.size(); ++i)
      gx.data[i] *= 1.0 - y.data[i] * y.data[i];
    tp.accumulate(x, gx);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::l2_normalize_rows(Var x) {
  const Tensor& tx = value(x);
  require(tx.shape.size() == 2, "l2_normalize_rows: rank 2 required");
  const std::size_t rows = tx.shape[0];
  const std::size_t n = tx.shape[1];
  std::vector<double> norms(rows, 0.0);
  Tensor out = tx;
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += tx.at(i, j) * tx.at(i, j);
    norms[i] = std::max(std::sqrt(s), 1e-12);
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] /= norms[i];
  }
  const bool rg = node(x).requires_grad;
  auto back = [x, y = out, norms, rows, n](Tape& tp, const Tensor& g) {
    Tensor gx;
    gx.shape = {rows, n};
    gx.data.assign(rows * n, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y.data[i * n + j] * g.data[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx.data[i * n + j] = (g.data[i * n + j] - y.data[i * n + j] * dot) / norms[i];
    }
    tp.accumulate(x, gx);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::log_softmax_rows(Var x) {
  const Tensor& tx = value(x);
  require(tx.shape.size() == 2, "log_softmax_rows: rank 2 required");
  const std::size_t rows = tx.shape[0];
  const std::size_t n = tx.shape[1];
  require(n > 0, "log_softmax_rows: empty rows");
  Tensor out = tx;
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, tx.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(tx.at(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] -= lse;
  }
  const bool rg = node(x).requires_grad;
  auto back = [x, y = out, rows, n](Tape& tp, const Tensor& g) {
    Tensor gx = g;
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g.data[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx.data[i * n + j] -= std::exp(y.data[i * n + j]) * s;
    }
    tp.accumulate(x, gx);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::row_logsumexp(Var x) {
  const Tensor& tx = value(x);
  require(tx.shape.size() == 2, "row_logsumexp: rank 2 required");
  const std::size_t rows = tx.shape[0];
  const std::size_t n = tx.shape[1];
  require(n > 0, "row_logsumexp: empty rows");
  Tensor out;
  out.shape = {rows};
  out.data.assign(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, tx.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(tx.at(i, j) - mx);
    out.data[i] = mx + std::log(s);
  }
  const bool rg = node(x).requires_grad;
  auto back = [x, lse = out, rows, n](Tape& tp, const Tensor& g) {
    const Tensor& tx = tp.value(x);
    Tensor gx;
    gx.shape = {rows, n};
    gx.data.assign(rows * n, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < n; ++j)
        gx.data[i * n + j] = std::exp(tx.at(i, j) - lse.data[i]) * g.data[i];
    }
    tp.accumulate(x, gx);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::take_diag(Var x) {
  const Tensor& tx = value(x);
  require(tx.shape.size() == 2 && tx.shape[0] == tx.shape[1],
          "take_diag: square rank 2 required");
  const std::size_t n = tx.shape[0];
  Tensor out;
  out.shape = {n};
  out.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = tx.at(i, i);
  const bool rg = node(x).requires_grad;
  auto back = [x, n](Tape& tp, const Tensor& g) {
    Tensor gx;
    gx.shape = {n, n};
    gx.data.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) gx.data[i * n + i] = g.data[i];
    tp.accumulate(x, gx);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::concat_cols(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape.size() == 2 && tb.shape.size() == 2,
          "concat_cols: rank 2 required");
  require(ta.shape[0] == tb.shape[0], "concat_cols: row count mismatch");
  const std::size_t rows = ta.shape[0];
  const std::size_t n1 = ta.shape[1];
  const std::size_t n2 = tb.shape[1];
  Tensor out;
  out.shape = {rows, n1 + n2};
  out.data.resize(rows * (n1 + n2));
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(ta.data.data() + i * n1, n1, out.data.data() + i * (n1 + n2));
    std::copy_n(tb.data.data() + i * n2, n2,
                out.data.data() + i * (n1 + n2) + n1);
  }
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  auto back = [a, b, rows, n1, n2](Tape& tp, const Tensor& g) {
    Tensor ga, gb;
    ga.shape = {rows, n1};
    ga.data.resize(rows * n1);
    gb.shape = {rows, n2};
    gb.data.resize(rows * n2);
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy_n(g.data.data() + i * (n1 + n2), n1, ga.data.data() + i * n1);
      std::copy_n(g.data.data() + i * (n1 + n2) + n1, n2,
                  gb.data.data() + i * n2);
    }
    tp.accumulate(a, ga);
    tp.accumulate(b, gb);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::mean_all(Var x) {
  const Tensor& tx = value(x);
  require(!tx.data.empty(), "mean_all: empty tensor");
  double s = 0.0;
  for (double v : tx.data) s += v;
  Tensor out;
  out.shape = {1};
  out.data = {s / static_cast<double>(tx.data.size())};
  const bool rg = node(x).requires_grad;
  auto back = [x](Tape& tp, const Tensor& g) {
    const Tensor& tx = tp.value(x);
    Tensor gx;
    gx.shape = tx.shape;
    gx.data.assign(tx.data.size(),
                   g.data[0] / static_cast<double>(tx.data.size()));
    tp.accumulate(x, gx);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::weighted_sum(Var x, Tensor weight) {
  const Tensor& tx = value(x);
  require(tx.shape == weight.shape, "weighted_sum: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < tx.data.size(); ++i)
    s += tx.data[i] * weight.data[i];
  Tensor out;
  out.shape = {1};
  out.data = {s};
  const bool rg = node(x).requires_grad;
  auto back = [x, weight](Tape& tp, const Tensor& g) {
    Tensor gx = weight;
    for (double& v : gx.data) v *= g.data[0];
    tp.accumulate(x, gx);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::lincomb(const std::vector<std::pair<double, Var>>& terms,
                  double constant) {
  double s = constant;
  bool rg = false;
  for (const auto& [c, v] : terms) {
    require(value(v).data.size() == 1, "lincomb: terms must be scalar");
    s += c * value(v).data[0];
    rg = rg || node(v).requires_grad;
  }
  Tensor out;
  out.shape = {1};
  out.data = {s};
  auto back = [terms](Tape& tp, const Tensor& g) {
    for (const auto& [c, v] : terms) {
      Tensor gv;
      gv.shape = {1};
      gv.data = {c * g.data[0]};
      tp.accumulate(v, gv);
    }
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

Var Tape::self_attention(Var x, Var wq, Var wk, Var wv, Tensor valid) {
  const Tensor& tx = value(x);
  require(tx.shape.size() == 3, "self_attention: input must be rank 3");
  const std::size_t b = tx.shape[0];
  const std::size_t l = tx.shape[1];
  const std::size_t d = tx.shape[2];
  require(value(wq).shape == std::vector<std::size_t>({d, d}) &&
              value(wk).shape == std::vector<std::size_t>({d, d}) &&
              value(wv).shape == std::vector<std::size_t>({d, d}),
          "self_attention: projection shape mismatch");
  require(valid.shape == std::vector<std::size_t>({b, l}),
          "self_attention: mask shape mismatch");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  auto project = [&](const Tensor& w, const Tensor& in, Tensor& out) {
    out.shape = {b, l, d};
    out.data.assign(b * l * d, 0.0);
    for (std::size_t r = 0; r < b * l; ++r) {
      const double* xr = in.data.data() + r * d;
      double* o = out.data.data() + r * d;
      for (std::size_t p = 0; p < d; ++p) {
        const double xv = xr[p];
        if (xv == 0.0) continue;
        const double* wr = w.data.data() + p * d;
        for (std::size_t j = 0; j < d; ++j) o[j] += xv * wr[j];
      }
    }
  };

  Tensor q, k, v;
  project(value(wq), tx, q);
  project(value(wk), tx, k);
  project(value(wv), tx, v);

  // attn: B×L×L softmax over valid keys; PAD queries still computed, their
  // outputs are dropped later by the masked pooling.
  Tensor attn;
  attn.shape = {b, l, l};
  attn.data.assign(b * l * l, 0.0);
  Tensor out;
  out.shape = {b, l, d};
  out.data.assign(b * l * d, 0.0);
  for (std::size_t e = 0; e < b; ++e) {
    for (std::size_t i = 0; i < l; ++i) {
      double* arow = attn.data.data() + (e * l + i) * l;
      const double* qi = q.data.data() + (e * l + i) * d;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l; ++j) {
        if (valid.at(e, j) == 0.0) continue;
        const double* kj = k.data.data() + (e * l + j) * d;
        double s = 0.0;
        for (std::size_t p = 0; p < d; ++p) s += qi[p] * kj[p];
        arow[j] = s * inv_sqrt_d;
        mx = std::max(mx, arow[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < l; ++j) {
        if (valid.at(e, j) == 0.0) {
          arow[j] = 0.0;
          continue;
        }
        arow[j] = std::exp(arow[j] - mx);
        z += arow[j];
      }
      for (std::size_t j = 0; j < l; ++j) arow[j] /= z;
      double* orow = out.data.data() + (e * l + i) * d;
      for (std::size_t j = 0; j < l; ++j) {
        if (arow[j] == 0.0) continue;
        const double* vj = v.data.data() + (e * l + j) * d;
        for (std::size_t p = 0; p < d; ++p) orow[p] += arow[j] * vj[p];
      }
    }
  }

  const bool rg = node(x).requires_grad || node(wq).requires_grad ||
                  node(wk).requires_grad || node(wv).requires_grad;
  auto back = [x, wq, wk, wv, q, k, v, attn, b, l, d,
               inv_sqrt_d](Tape& tp, const Tensor& g) {
    const Tensor& tx = tp.value(x);
    Tensor dq, dk, dv;
    dq.shape = dk.shape = dv.shape = {b, l, d};
    dq.data.assign(b * l * d, 0.0);
    dk.data.assign(b * l * d, 0.0);
    dv.data.assign(b * l * d, 0.0);
    for (std::size_t e = 0; e < b; ++e) {
      for (std::size_t i = 0; i < l; ++i) {
        const double* arow = attn.data.data() + (e * l + i) * l;
        const double* go = g.data.data() + (e * l + i) * d;
        // dA_ij = go · v_j, then softmax backward into scores.
        std::vector<double> da(l, 0.0);
        double inner = 0.0;
        for (std::size_t j = 0; j < l; ++j) {
          if (arow[j] == 0.0) continue;
          const double* vj = v.data.data() + (e * l + j) * d;
          double s = 0.0;
          for (std::size_t p = 0; p < d; ++p) s += go[p] * vj[p];
          da[j] = s;
          inner += da[j] * arow[j];
          double* dvj = dv.data.data() + (e * l + j) * d;
          for (std::size_t p = 0; p < d; ++p) dvj[p] += arow[j] * go[p];
        }
        const double* qi = q.data.data() + (e * l + i) * d;
        double* dqi = dq.data.data() + (e * l + i) * d;
        for (std::size_t j = 0; j < l; ++j) {
          if (arow[j] == 0.0) continue;
          const double ds = arow[j] * (da[j] - inner) * inv_sqrt_d;
          const double* kj = k.data.data() + (e * l + j) * d;
          double* dkj = dk.data.data() + (e * l + j) * d;
          for (std::size_t p = 0; p < d; ++p) {
            dqi[p] += ds * kj[p];
            dkj[p] += ds * qi[p];
          }
        }
      }
    }
    // Through the projections: dX += dQ Wq^T + dK Wk^T + dV Wv^T,
    // dW• = X^T dQ• accumulated over all positions.
    auto fold = [&](Var w, const Tensor& dproj, Tensor& gx_acc) {
      const Tensor& tw = tp.value(w);
      if (tp.node(x).requires_grad) {
        for (std::size_t r = 0; r < b * l; ++r) {
          const double* dp = dproj.data.data() + r * d;
          double* o = gx_acc.data.data() + r * d;
          for (std::size_t p = 0; p < d; ++p) {
            double s = 0.0;
            const double* wr = tw.data.data() + p * d;
            for (std::size_t j = 0; j < d; ++j) s += dp[j] * wr[j];
            o[p] += s;
          }
        }
      }
      if (tp.node(w).requires_grad) {
        Tensor gw;
        gw.shape = {d, d};
        gw.data.assign(d * d, 0.0);
        for (std::size_t r = 0; r < b * l; ++r) {
          const double* xr = tx.data.data() + r * d;
          const double* dp = dproj.data.data() + r * d;
          for (std::size_t p = 0; p < d; ++p) {
            const double xv = xr[p];
            if (xv == 0.0) continue;
            double* o = gw.data.data() + p * d;
            for (std::size_t j = 0; j < d; ++j) o[j] += xv * dp[j];
          }
        }
        tp.accumulate(w, gw);
      }
    };
    Tensor gx;
    gx.shape = {b, l, d};
    gx.data.assign(b * l * d, 0.0);
    fold(wq, dq, gx);
    fold(wk, dk, gx);
    fold(wv, dv, gx);
    if (tp.node(x).requires_grad) tp.accumulate(x, gx);
  };
  return push(std::move(out), rg, rg ? back : std::function<void(Tape&, const Tensor&)>{});
}

}  // namespace sslc::diff
