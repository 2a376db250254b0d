#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dsdlab/rng.hpp"
#include "dsdlab/tensor.hpp"

namespace testing {

inline dsdlab::Tensor random_matrix(dsdlab::Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  dsdlab::Tensor t = dsdlab::Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// Softmax of one row, computed independently of the library kernels.
inline std::vector<double> naive_softmax(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = v > m ? v : m;
  std::vector<double> p(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += (p[i] = std::exp(z[i] - m));
  for (double& v : p) v /= total;
  return p;
}

inline std::vector<double> row_of(const dsdlab::Tensor& t, std::size_t r) {
  auto s = t.row(r);
  return {s.begin(), s.end()};
}

}  // namespace testing
