#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "sslc/tensor.hpp"

namespace sslc::diff {

struct Var {
  std::int32_t index = -1;
  bool valid() const { return index >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
// creation order is a valid topological order for backward. One tape records
// one (possibly multi-branch) forward pass; backward may run once.
class Tape {
 public:
  Var constant(Tensor value);
  Var leaf(Tensor value);  // differentiable input (parameters, perturbations)

  const Tensor& value(Var v) const { return node(v).value; }
  // Gradient of the last backward target w.r.t. v; zeros if v was unreached.
  Tensor gradient(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  void backward(Var loss);  // loss must be scalar; seeds with 1
  void backward(Var out, const Tensor& upstream);

  std::size_t size() const { return nodes_.size(); }

  // ---- ops ----
  // table: V×d, ids row-major b*l; result B×L×d.
  Var gather_rows(Var table, const std::vector<int>& ids, std::size_t b,
                  std::size_t l);
  Var add(Var a, Var b);              // same shape
  Var sub(Var a, Var b);              // same shape
  Var mul_const(Var a, Tensor mask);  // elementwise, mask is not differentiated
  Var scale(Var a, double c);
  Var add_const_scalar(Var a, double c);  // a is {1}
  // x: B×L×d, valid: B×L in {0,1}; mean over valid positions per example.
  Var masked_mean_rows(Var x, Tensor valid);
  Var matmul(Var a, Var w);     // (B×K)·(K×N)
  Var matmul_nt(Var a, Var b);  // (B×K)·(M×K)^T -> B×M
  Var add_row_bias(Var x, Var bias);
  Var tanh_elem(Var x);
  Var l2_normalize_rows(Var x);
  Var log_softmax_rows(Var x);
  Var row_logsumexp(Var x);  // B×N -> {B}
  Var take_diag(Var x);      // B×B -> {B}
  Var concat_cols(Var a, Var b);
  Var mean_all(Var x);                     // -> {1}
  Var weighted_sum(Var x, Tensor weight);  // sum(w ⊙ x) -> {1}
  // Scalar linear combination sum_i coeff_i * term_i (+ constant).
  Var lincomb(const std::vector<std::pair<double, Var>>& terms,
              double constant = 0.0);
  // Single-head scaled dot-product self-attention with key masking.
  // x: B×L×d; wq/wk/wv: d×d; valid: B×L.
  Var self_attention(Var x, Var wq, Var wk, Var wv, Tensor valid);

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void(Tape&, const Tensor&)> back;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Tensor value, bool requires_grad,
           std::function<void(Tape&, const Tensor&)> back);
  void accumulate(Var v, const Tensor& g);
  void add_into(Var v, std::size_t offset, const double* g, std::size_t n);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace sslc::diff
