#include "dsdlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "dsdlab/error.hpp"

namespace dsdlab {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const std::vector<std::size_t>& shape) {
  if (shape.empty() || shape.size() > 2) throw DimensionError("tensor rank must be 1 or 2");
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive");
}

void require_matrix_product(const Tensor& a, const Tensor& b, std::size_t ak, std::size_t bk) {
  if (ak != bk)
    throw DimensionError("matmul inner dimensions disagree: " + a.shape_string() + " x " +
                         b.shape_string());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (product(shape_) != data_.size())
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor({rows, cols}, fill);
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  if (rows.size() == 0) throw DimensionError("from_rows needs at least one row");
  const std::size_t cols = rows.begin()->size();
  std::vector<double> data;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

std::size_t Tensor::rows() const { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

namespace kernels {

// Row i of the result depends only on row i of `a`, accumulated in a fixed
// k order, so per-row results do not change with batch composition.
Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require_matrix_product(a, b, k, b.rows());
  Tensor c = Tensor::matrix(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  require_matrix_product(a, b, k, b.cols());
  Tensor c = Tensor::matrix(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = pb + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      pc[i * n + j] = s;
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  require_matrix_product(a, b, k, b.rows());
  Tensor c = Tensor::matrix(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = pa + p * m;
    const double* bp = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  return c;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& x : row) {
      x = std::exp(x - mx);
      total += x;
    }
    for (double& x : row) x /= total;
  }
  return out;
}

Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double x : row) total += std::exp(x - mx);
    const double lse = mx + std::log(total);
    for (double& x : row) x -= lse;
  }
  return out;
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) { return kernels::matmul(a, b); }

Tensor log_softmax(const Tensor& logits) {
  if (!logits.all_finite()) throw NumericError("log_softmax: non-finite logits");
  return kernels::log_softmax_rows(logits);
}

Tensor softmax(const Tensor& logits) {
  if (!logits.all_finite()) throw NumericError("softmax: non-finite logits");
  return kernels::softmax_rows(logits);
}

}  // namespace dsdlab
