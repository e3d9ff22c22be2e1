#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace sslc {

// Dense row-major tensor of doubles, rank 1..3. Small enough on purpose:
// everything in this project is desk-scale and 64-bit.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s);

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
  static Tensor scalar(double v);
  static Tensor row(std::initializer_list<double> v);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t k) const { return shape[k]; }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;

  void fill(double v);
  void add_scaled(const Tensor& o, double c);  // *this += c * o
  double dot(const Tensor& o) const;
  double frobenius_norm() const;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

}  // namespace sslc
