#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lorsa {

enum class Dtype : uint32_t { f64 = 0, f32 = 1 };

// Dense row-major tensor. Values are held as doubles regardless of dtype;
// the dtype tag controls on-disk precision only.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> data;
  Dtype dtype = Dtype::f64;

  Tensor() = default;
  explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
    data.assign(numel(shape), 0.0);
  }
  Tensor(std::vector<size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) throw std::invalid_argument("tensor: data/shape mismatch");
  }

  static size_t numel(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
  }
  static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }

  size_t size() const { return data.size(); }
  size_t rank() const { return shape.size(); }
  size_t rows() const { return shape.at(0); }
  size_t cols() const { return shape.at(1); }

  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }
  double& at2(size_t i, size_t j) { return data[i * shape[1] + j]; }
  double at2(size_t i, size_t j) const { return data[i * shape[1] + j]; }

  double* row_ptr(size_t i) { return data.data() + i * shape[1]; }
  const double* row_ptr(size_t i) const { return data.data() + i * shape[1]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

// Deterministic pairwise reduction. All batch/loss accumulation goes through
// a fixed tree so results do not depend on worker count or scheduling.
double tree_sum(std::span<const double> xs);

// 2-D matrix product, sequential fixed-order summation.
Tensor matmul(const Tensor& a, const Tensor& b);

// c += a * b for raw row-major blocks; the matmul kernel everything hot uses.
void matmul_accum(const double* a, const double* b, double* c, size_t n, size_t k, size_t m);

// Row-wise softmax over the trailing n x n matrix (rank 2 or 3). With
// `causal`, entries j > i are masked out before exponentiation; masked
// entries come back as exact zeros. Rows are stabilized by max subtraction.
Tensor softmax_rows(const Tensor& scores, bool causal);
void softmax_rows_inplace(Tensor& scores, bool causal);

bool all_finite(const Tensor& t);
void ensure_finite(const Tensor& t, const std::string& what);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
// cos(a, b); returns 0 when either vector is (near) zero.
double cosine(std::span<const double> a, std::span<const double> b);

}  // namespace lorsa
