#include "dsdlab/controller.hpp"

#include <algorithm>
#include <cmath>

#include "dsdlab/error.hpp"

namespace dsdlab {

void ControllerConfig::validate() const {
  if (!(beta_min >= 0.0 && beta_min < beta_max && beta_max <= 1.0))
    throw ConfigError("controller bounds must satisfy 0 <= beta_min < beta_max <= 1");
  if (!(kp >= 0.0) || !(ki >= 0.0)) throw ConfigError("controller gains must be nonnegative");
  if (window < 1) throw ConfigError("controller window must be at least 1");
  if (!std::isfinite(set_point)) throw ConfigError("controller set point must be finite");
  if (!(beta_init >= 0.0 && beta_init <= 1.0)) throw ConfigError("beta_init must lie in [0, 1]");
}

ControllerState controller_init(const ControllerConfig& config) {
  config.validate();
  ControllerState s;
  s.last_beta = config.beta_init;
  return s;
}

double controller_step(const ControllerConfig& config, ControllerState& state, double u_t) {
  if (!std::isfinite(u_t)) throw NumericError("controller input u(t) is not finite");
  const double e = config.set_point - u_t;
  const double proportional = config.kp / (1.0 + std::exp(e));

  state.window_errors.push_back(e);
  const bool flush = state.window_errors.size() >= config.window;
  double pending = 0.0;
  if (flush)
    for (double w : state.window_errors) pending += w;
  const double candidate = state.integral + pending;

  const double raw = proportional - config.ki * candidate + config.beta_min;
  const double beta = std::clamp(raw, config.beta_min, config.beta_max);

  if (flush) {
    // -ki * pending < 0 drives the output down, > 0 drives it up.
    const bool deeper_below = raw < config.beta_min && pending > 0.0;
    const bool deeper_above = raw > config.beta_max && pending < 0.0;
    if (!(deeper_below || deeper_above)) state.integral = candidate;
    state.window_errors.clear();
  }
  state.t += 1;
  state.last_error = e;
  state.last_beta = beta;
  return beta;
}

std::vector<ControllerSample> simulate(const ControllerConfig& config, const std::vector<double>& u_sequence) {
  if (u_sequence.empty()) throw DataError("controller simulation needs at least one u value");
  ControllerState state = controller_init(config);
  std::vector<ControllerSample> out;
  out.reserve(u_sequence.size());
  for (double u : u_sequence) {
    const std::size_t t = state.t;
    const double beta = controller_step(config, state, u);
    out.push_back({t, u, state.last_error, beta});
  }
  return out;
}

PiController::PiController(ControllerConfig config) : config_(config), state_(controller_init(config_)) {}

}  // namespace dsdlab
