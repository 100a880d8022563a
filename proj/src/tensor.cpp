#include "lorsa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lorsa {

double tree_sum(std::span<const double> xs) {
  const size_t n = xs.size();
  if (n == 0) return 0.0;
  if (n <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const size_t half = n / 2;
  return tree_sum(xs.subspan(0, half)) + tree_sum(xs.subspan(half));
}

void matmul_accum(const double* a, const double* b, double* c, size_t n, size_t k, size_t m) {
  // ikj order: streams b and c rows, auto-vectorizes on the j loop.
  for (size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * m;
    for (size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 tensors required");
  if (a.shape[1] != b.shape[0])
    throw std::invalid_argument("matmul: inner extents disagree (" + std::to_string(a.shape[1]) +
                                " vs " + std::to_string(b.shape[0]) + ")");
  Tensor c({a.shape[0], b.shape[1]});
  matmul_accum(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1], b.shape[1]);
  return c;
}

void softmax_rows_inplace(Tensor& scores, bool causal) {
  size_t n;
  size_t batches;
  if (scores.rank() == 2) {
    n = scores.shape[1];
    if (scores.shape[0] != n) throw std::invalid_argument("softmax_rows: trailing matrix not square");
    batches = 1;
  } else if (scores.rank() == 3) {
    n = scores.shape[2];
    if (scores.shape[1] != n) throw std::invalid_argument("softmax_rows: trailing matrix not square");
    batches = scores.shape[0];
  } else {
    throw std::invalid_argument("softmax_rows: rank-2 or rank-3 tensor required");
  }

  for (size_t b = 0; b < batches; ++b) {
    double* mat = scores.data.data() + b * n * n;
    for (size_t i = 0; i < n; ++i) {
      double* row = mat + i * n;
      const size_t limit = causal ? i + 1 : n;
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t j = 0; j < limit; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (size_t j = 0; j < limit; ++j) {
        row[j] = std::exp(row[j] - mx);
        denom += row[j];
      }
      for (size_t j = 0; j < limit; ++j) row[j] /= denom;
      for (size_t j = limit; j < n; ++j) row[j] = 0.0;
    }
  }
}

Tensor softmax_rows(const Tensor& scores, bool causal) {
  Tensor out = scores;
  softmax_rows_inplace(out, causal);
  return out;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

void ensure_finite(const Tensor& t, const std::string& what) {
  if (!all_finite(t)) throw std::runtime_error("non-finite values in " + what);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  const size_t n = std::min(a.size(), b.size());
  for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return dot(a, b) / (na * nb);
}

}  // namespace lorsa
