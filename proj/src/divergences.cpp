#include "dsdlab/divergences.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dsdlab/error.hpp"

namespace dsdlab {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("distribution lengths differ: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  if (a.size() < 2) throw DimensionError("distributions need at least two outcomes");
}

void check_batch(const Tensor& logits, std::span<const std::size_t> targets, std::span<const double> weights) {
  if (logits.rank() != 2) throw DimensionError("logits must be positions x vocab");
  if (logits.cols() < 2) throw DimensionError("vocabulary must have at least two entries");
  if (targets.size() != logits.rows())
    throw DimensionError("target count " + std::to_string(targets.size()) + " differs from " +
                         std::to_string(logits.rows()) + " logit rows");
  if (!weights.empty() && weights.size() != targets.size())
    throw DimensionError("weight count differs from target count");
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i] >= logits.cols())
      throw DataError("target id " + std::to_string(targets[i]) + " at position " + std::to_string(i) +
                      " outside vocabulary of " + std::to_string(logits.cols()));
  if (!logits.all_finite()) throw NumericError("non-finite logits");
}

double weight_of(std::span<const double> weights, std::size_t i, std::size_t n) {
  return weights.empty() ? 1.0 / static_cast<double>(n) : weights[i];
}

void fill_target(std::vector<double>& q, std::size_t gold, double smoothing) {
  const double off = smoothing > 0.0 ? smoothing / static_cast<double>(q.size() - 1) : 0.0;
  std::fill(q.begin(), q.end(), off);
  q[gold] = 1.0 - smoothing;
}

void check_smoothing(double smoothing) {
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("smoothing must lie in [0, 1)");
}

// Chains dL/dp through softmax: dL/dz = p * (g - <p, g>).
void softmax_chain(std::span<const double> p, std::span<const double> dp, std::span<double> dz, double w) {
  double dot = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) dot += p[k] * dp[k];
  for (std::size_t k = 0; k < p.size(); ++k) dz[k] = w * p[k] * (dp[k] - dot);
}

}  // namespace

void SkewConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
}

DivergenceAggregation parse_aggregation(std::string_view name) {
  if (name == "mean_per_token") return DivergenceAggregation::MeanPerToken;
  if (name == "sum_per_sentence") return DivergenceAggregation::SumPerSentence;
  throw ConfigError("unknown divergence aggregation '" + std::string(name) + "'");
}

std::string_view aggregation_name(DivergenceAggregation mode) {
  return mode == DivergenceAggregation::MeanPerToken ? "mean_per_token" : "sum_per_sentence";
}

void validate_distribution(std::span<const double> p, double tolerance) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DataError("distribution has a negative or non-finite entry");
    total += v;
  }
  if (std::abs(total - 1.0) > tolerance) throw DataError("distribution does not sum to 1");
}

double kl(std::span<const double> q, std::span<const double> p, KlDirection direction, double epsilon) {
  check_pair(q, p);
  if (direction == KlDirection::Reverse) std::swap(q, p);
  double total = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k)
    if (q[k] > 0.0) total += q[k] * std::log((q[k] + epsilon) / (p[k] + epsilon));
  return total;
}

double skew_divergence(std::span<const double> first, std::span<const double> second, double alpha,
                       double epsilon) {
  check_pair(first, second);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  double total = 0.0;
  for (std::size_t k = 0; k < first.size(); ++k) {
    if (first[k] <= 0.0) continue;
    const double mix = alpha * first[k] + (1.0 - alpha) * second[k];
    total += first[k] * std::log((first[k] + epsilon) / (mix + epsilon));
  }
  return total;
}

LossOutput cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, double smoothing,
                         std::span<const double> weights, double epsilon) {
  check_batch(logits, targets, weights);
  check_smoothing(smoothing);
  const std::size_t n = logits.rows(), v = logits.cols();
  const Tensor probs = kernels::softmax_rows(logits);
  LossOutput out{0.0, Tensor::matrix(n, v)};
  std::vector<double> q(v), dp(v);
  for (std::size_t i = 0; i < n; ++i) {
    fill_target(q, targets[i], smoothing);
    auto p = probs.row(i);
    double loss = 0.0;
    for (std::size_t k = 0; k < v; ++k) {
      if (q[k] > 0.0) loss -= q[k] * std::log(p[k] + epsilon);
      dp[k] = -q[k] / (p[k] + epsilon);
    }
    const double w = weight_of(weights, i, n);
    out.value += w * loss;
    softmax_chain(p, dp, out.grad_logits.row(i), w);
  }
  return out;
}

LossOutput dsd_loss(const Tensor& logits, std::span<const std::size_t> targets, const SkewConfig& skew,
                    double beta, std::span<const double> weights, double smoothing) {
  check_batch(logits, targets, weights);
  skew.validate();
  check_smoothing(smoothing);
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  const double a = skew.alpha, eps = skew.epsilon, rb = 1.0 - beta;
  const std::size_t n = logits.rows(), v = logits.cols();
  const Tensor probs = kernels::softmax_rows(logits);
  LossOutput out{0.0, Tensor::matrix(n, v)};
  std::vector<double> y(v), dp(v);
  for (std::size_t i = 0; i < n; ++i) {
    fill_target(y, targets[i], smoothing);
    auto p = probs.row(i);
    double bracket = 0.0;
    for (std::size_t k = 0; k < v; ++k) {
      const double toward_model = (1.0 - a) * p[k] + a * y[k] + eps;
      const double toward_data = (1.0 - a) * y[k] + a * p[k] + eps;
      const double self = p[k] + eps;
      bracket += beta * y[k] * std::log(toward_model) - rb * p[k] * std::log(self) +
                 rb * p[k] * std::log(toward_data);
      dp[k] = -beta * y[k] * (1.0 - a) / toward_model + rb * (std::log(self) + p[k] / self) -
              rb * (std::log(toward_data) + a * p[k] / toward_data);
    }
    const double w = weight_of(weights, i, n);
    out.value -= w * bracket;
    softmax_chain(p, dp, out.grad_logits.row(i), w);
  }
  if (!std::isfinite(out.value)) throw NumericError("dsd loss is not finite");
  return out;
}

LossOutput cdsd_loss(const Tensor& logits, std::span<const std::size_t> targets, const SkewConfig& skew,
                     double beta_t, std::span<const double> weights, double smoothing) {
  return dsd_loss(logits, targets, skew, beta_t, weights, smoothing);
}

double sample_divergence(const Tensor& logits, std::span<const std::size_t> targets, const SkewConfig& skew,
                         DivergenceAggregation mode, std::span<const std::size_t> sentence) {
  if (targets.empty() || logits.size() == 0) throw DataError("cannot sample divergence of an empty batch");
  check_batch(logits, targets, {});
  skew.validate();
  if (!sentence.empty() && sentence.size() != targets.size())
    throw DimensionError("sentence map length differs from target count");
  const Tensor probs = kernels::softmax_rows(logits);
  std::vector<double> q(logits.cols());
  // Ordered map keeps the summation order independent of hashing.
  std::map<std::size_t, std::pair<double, std::size_t>> per_sentence;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    fill_target(q, targets[i], 0.0);
    const double s = skew_divergence(q, probs.row(i), skew.alpha, skew.epsilon);
    auto& acc = per_sentence[sentence.empty() ? 0 : sentence[i]];
    acc.first += s;
    acc.second += 1;
  }
  double total = 0.0;
  for (const auto& [id, acc] : per_sentence)
    total += mode == DivergenceAggregation::MeanPerToken ? acc.first / static_cast<double>(acc.second) : acc.first;
  return total / static_cast<double>(per_sentence.size());
}

}  // namespace dsdlab
