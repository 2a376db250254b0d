#pragma once

#include <cstddef>
#include <span>
#include <string_view>

#include "dsdlab/tensor.hpp"

namespace dsdlab {

// Skew mixing weight and the floor added inside every log argument.
struct SkewConfig {
  double alpha = 0.01;
  double epsilon = 1e-12;

  void validate() const;
};

// Loss value plus its gradient with respect to the pre-softmax logits
// (one row per scored position).
struct LossOutput {
  double value = 0.0;
  Tensor grad_logits;
};

enum class KlDirection { Forward, Reverse };

// How per-position skew samples are folded into the controller input u(t).
enum class DivergenceAggregation { MeanPerToken, SumPerSentence };

DivergenceAggregation parse_aggregation(std::string_view name);
std::string_view aggregation_name(DivergenceAggregation mode);

// Throws DataError unless `p` is a distribution (nonnegative, sums to 1).
void validate_distribution(std::span<const double> p, double tolerance = 1e-9);

// forward: sum Q log((Q+eps)/(P+eps)); reverse: sum P log((P+eps)/(Q+eps)).
double kl(std::span<const double> q, std::span<const double> p, KlDirection direction,
          double epsilon = 1e-12);

// KL(first || alpha*first + (1-alpha)*second).
double skew_divergence(std::span<const double> first, std::span<const double> second, double alpha,
                       double epsilon = 1e-12);

// All batch losses below score rows of `logits` (positions x vocab) against
// gold ids. `weights` gives each position's share of the total; empty means a
// plain mean over positions. Targets are one-hot, or label smoothed when
// `smoothing` > 0: (1 - smoothing) on the gold id, smoothing/(V-1) elsewhere.
LossOutput cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, double smoothing,
                         std::span<const double> weights = {}, double epsilon = 1e-12);

// Interpolated skew loss:
//   -[ beta y.log((1-a)p + a y) - (1-beta) p.log p + (1-beta) p.log((1-a)y + a p) ]
// per position, each log argument floored by epsilon.
LossOutput dsd_loss(const Tensor& logits, std::span<const std::size_t> targets, const SkewConfig& skew,
                    double beta, std::span<const double> weights = {}, double smoothing = 0.0);

// dsd_loss with the balanced weight supplied by the controller for this step.
LossOutput cdsd_loss(const Tensor& logits, std::span<const std::size_t> targets, const SkewConfig& skew,
                     double beta_t, std::span<const double> weights = {}, double smoothing = 0.0);

// u(t): skew(Q_i, P_i) per position, aggregated per `mode`. `sentence` maps
// positions to sentence ids; empty treats the batch as one sentence.
double sample_divergence(const Tensor& logits, std::span<const std::size_t> targets, const SkewConfig& skew,
                         DivergenceAggregation mode = DivergenceAggregation::MeanPerToken,
                         std::span<const std::size_t> sentence = {});

}  // namespace dsdlab
