#include "sslc/tensor.hpp"

#include <cmath>

#include "sslc/util.hpp"

namespace sslc {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (const std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
  if (shape.empty() || shape.size() > 3) throw Error("Tensor: rank must be 1..3");
  data.assign(shape_product(shape), 0.0);
}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.data[0] = v;
  return t;
}

Tensor Tensor::row(std::initializer_list<double> v) {
  Tensor t({v.size()});
  std::size_t i = 0;
  for (const double x : v) t.data[i++] = x;
  return t;
}

bool Tensor::all_finite() const {
  for (const double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data) x = v;
}

void Tensor::add_scaled(const Tensor& o, double c) {
  if (!same_shape(o)) throw Error("Tensor::add_scaled: shape mismatch");
  for (std::size_t i = 0; i < data.size(); ++i) data[i] += c * o.data[i];
}

double Tensor::dot(const Tensor& o) const {
  if (!same_shape(o)) throw Error("Tensor::dot: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) s += data[i] * o.data[i];
  return s;
}

double Tensor::frobenius_norm() const {
  double s = 0.0;
  for (const double v : data) s += v * v;
  return std::sqrt(s);
}

}  // namespace sslc
