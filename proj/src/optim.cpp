#include "dsdlab/optim.hpp"

#include <cmath>
#include <string>

#include "dsdlab/error.hpp"

namespace dsdlab {

namespace {

void check_grads(const std::vector<Tensor>& params, const std::vector<Tensor>& grads, std::uint64_t step) {
  if (params.size() != grads.size()) throw DimensionError("gradient block count differs from parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i]))
      throw DimensionError("gradient block " + std::to_string(i) + " has shape " + grads[i].shape_string());
    if (!grads[i].all_finite())
      throw NumericError("non-finite gradient in block " + std::to_string(i) + " at optimizer step " +
                         std::to_string(step));
  }
}

}  // namespace

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state, double lr) {
  check_grads(params, grads, state.t + 1);
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.shape(), 0.0);
      state.v.emplace_back(p.shape(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("Adam moments do not match parameters");
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
  check_grads(params, grads, 0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
  }
}

double global_norm(const std::vector<Tensor>& grads) {
  double total = 0.0;
  for (const auto& g : grads)
    for (double x : g.data()) total += x * x;
  return std::sqrt(total);
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g.data()) x *= scale;
  }
  return norm;
}

}  // namespace dsdlab
