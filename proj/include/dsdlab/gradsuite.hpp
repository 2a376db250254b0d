#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace dsdlab {

struct GradcheckOptions {
  std::size_t batches = 100;
  std::size_t vocab = 8;
  std::size_t positions = 4;
  double eps = 1e-5;
  double threshold = 1e-5;
  std::uint64_t seed = 1;
  bool model = true;     // also check parameter gradients through a tiny seq2seq
  double corrupt = 0.0;  // test fixture: scales analytic gradients by (1 + corrupt)
};

struct GradcheckLine {
  std::string name;
  std::size_t cases = 0;
  double max_error = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckLine> lines;
  bool pass() const;
};

// Logit gradients of every loss (XENT, XENT+smooth, DSD at beta 0/0.5/1, cDSD
// with controller-emitted betas) on random batches, then optionally the full
// model backward pass for each loss family.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace dsdlab
