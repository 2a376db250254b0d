#pragma once

#include <cstddef>
#include <vector>

namespace dsdlab {

struct ControllerConfig {
  double kp = 0.01;
  double ki = 0.0001;
  double beta_min = 0.85;
  double beta_max = 0.95;
  double set_point = 0.0;
  std::size_t window = 1;
  double beta_init = 1.0;

  void validate() const;
};

struct ControllerState {
  std::size_t t = 0;
  double integral = 0.0;           // committed sum of errors
  double last_beta = 1.0;
  double last_error = 0.0;
  std::vector<double> window_errors;  // errors seen since the last commit (window > 1)
};

ControllerState controller_init(const ControllerConfig& config);

// Nonlinear PI law with e(t) = u* - u(t):
//   beta(t) = clamp(kp / (1 + exp(e(t))) - ki * sum_j e(j) + beta_min, beta_min, beta_max)
// Errors are folded into the integral once per `window` steps. While the
// output sits on a bound and the incoming errors push further past it, the
// integral is frozen (conditional-integration anti-windup).
double controller_step(const ControllerConfig& config, ControllerState& state, double u_t);

struct ControllerSample {
  std::size_t t;
  double u;
  double error;
  double beta;
};

std::vector<ControllerSample> simulate(const ControllerConfig& config, const std::vector<double>& u_sequence);

// Stateful wrapper used by the trainer.
class PiController {
 public:
  explicit PiController(ControllerConfig config);

  double step(double u_t) { return controller_step(config_, state_, u_t); }
  const ControllerConfig& config() const { return config_; }
  const ControllerState& state() const { return state_; }
  void restore(ControllerState state) { state_ = std::move(state); }

 private:
  ControllerConfig config_;
  ControllerState state_;
};

}  // namespace dsdlab
