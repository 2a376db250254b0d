#pragma once

#include <cstdint>
#include <vector>

#include "dsdlab/tensor.hpp"

namespace dsdlab {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  void reset() {
    t = 0;
    m.clear();
    v.clear();
  }
};

// Bias-corrected Adam. Moment buffers are created on first use.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state, double lr);

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr);

double global_norm(const std::vector<Tensor>& grads);

// Rescales grads in place when their global norm exceeds max_norm (<= 0 disables).
// Returns the norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace dsdlab
