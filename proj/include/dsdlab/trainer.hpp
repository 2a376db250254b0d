#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dsdlab/controller.hpp"
#include "dsdlab/corpus.hpp"
#include "dsdlab/divergences.hpp"
#include "dsdlab/eval.hpp"
#include "dsdlab/optim.hpp"
#include "dsdlab/seq2seq.hpp"

namespace dsdlab {

enum class LossKind { Xent, XentSmooth, Dsd, Cdsd };
enum class OptimizerKind { Adam, Sgd };
enum class SwitchRule { Fixed, Plateau };

LossKind parse_loss_kind(std::string_view name);
std::string_view loss_kind_name(LossKind kind);
OptimizerKind parse_optimizer(std::string_view name);
std::string_view optimizer_name(OptimizerKind kind);
SwitchRule parse_switch_rule(std::string_view name);
std::string_view switch_rule_name(SwitchRule rule);

struct Phase {
  std::size_t start = 0;
  LossKind loss = LossKind::XentSmooth;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double learning_rate = 3e-4;
  double smoothing = 0.1;  // XentSmooth only
  double beta = 1.0;       // Dsd only
};

struct TrainSchedule {
  std::vector<Phase> phases;
  std::size_t total_steps = 6000;
  // Plateau: phase 1 starts early once dev loss fails to improve for
  // `patience` consecutive evaluations; later phases shift with it.
  SwitchRule switch_rule = SwitchRule::Fixed;
  std::size_t patience = 3;

  void validate() const;

  // XENT+smooth/Adam(3e-4) -> cDSD/SGD(0.1) -> SGD(0.05), 3000/2000/1000 steps.
  static TrainSchedule desk_default();
  // Same boundaries, loss stays XENT+smooth; only the optimizer switches.
  static TrainSchedule optimizer_switch_only();
  // Same boundaries with a fixed-beta DSD loss after the switch.
  static TrainSchedule fixed_dsd(double beta);
};

struct TrainerConfig {
  std::uint64_t seed = 1;
  std::size_t batch_size = 32;
  double clip_norm = 5.0;
  std::size_t log_every = 10;
  std::size_t eval_every = 200;       // dev BLEU cadence, 0 disables periodic evals
  std::size_t dev_limit = 0;          // 0 = whole dev set
  std::size_t checkpoint_every = 0;   // periodic resume point, 0 = boundaries only
  std::size_t set_point_window = 100;
  double metric_smoothing = 0.1;      // smoothing of the logged training cross entropy
  SkewConfig skew;
  DivergenceAggregation u_mode = DivergenceAggregation::MeanPerToken;
  ControllerConfig controller;
  std::optional<double> set_point;    // unset: measured from the ML phase
  DecodeConfig decode;
  std::size_t stop_after = 0;         // stop with a resume checkpoint after this step

  void validate() const;
};

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t phase = 0;
  LossKind loss_kind = LossKind::Xent;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double learning_rate = 0.0;
  double loss = 0.0;
  double xent = 0.0;   // label-smoothed training cross entropy (metric_smoothing)
  double nll = 0.0;    // unsmoothed training cross entropy
  double u = 0.0;      // sampled skew divergence s_alpha(Q, P)
  std::optional<double> beta;
  double grad_norm = 0.0;
  std::optional<double> dev_bleu;
  double wall_clock = 0.0;  // seconds since the run (or resume) started
};

// Metrics line; wall-clock goes to a separate timing stream so the metrics
// log of a seeded run is reproducible byte for byte.
nlohmann::json metrics_json(const MetricsRecord& record);

struct TrainResult {
  Seq2SeqParams params;
  std::vector<MetricsRecord> history;  // one per step executed in this call
  std::vector<std::size_t> phase_starts;
  std::map<std::size_t, double> dev_bleu;
  std::optional<double> set_point;
  std::size_t steps_done = 0;
  std::size_t total_steps = 0;
  bool completed = false;
};

// Runs the schedule. With a non-empty `out_dir`, writes metrics.jsonl,
// timing.jsonl and checkpoints/ (step_N.ckpt at every phase boundary and at
// the end, last.ckpt as the resume point). `resume` continues from
// out_dir/checkpoints/last.ckpt.
TrainResult train(const Seq2SeqConfig& model, const ParallelCorpus& train_corpus, const ParallelCorpus& dev_corpus,
                  const TrainSchedule& schedule, const TrainerConfig& config,
                  const std::filesystem::path& out_dir = {}, bool resume = false);

// Corpus BLEU of `decode` outputs on the first `limit` dev pairs (0 = all).
double evaluate_hook(const Seq2SeqParams& params, const ParallelCorpus& dev, const DecodeConfig& decode,
                     std::size_t limit = 0);
double evaluate_hook(const std::filesystem::path& checkpoint, const ParallelCorpus& dev, const DecodeConfig& decode,
                     std::size_t limit = 0);

// Teacher-forced mean cross entropy with the given smoothing.
double corpus_cross_entropy(const Seq2SeqParams& params, const ParallelCorpus& corpus, double smoothing,
                            std::size_t batch_size = 64, std::size_t limit = 0);

struct StepResult {
  double loss = 0.0;
  double xent = 0.0;
  double nll = 0.0;
  double u = 0.0;
  std::optional<double> beta;
  std::vector<Tensor> grads;
};

// One forward/backward pass. For cDSD the controller is stepped with this
// batch's u(t) and the emitted beta is the one the loss uses.
StepResult compute_step(const Seq2SeqParams& params, const Batch& batch, const Phase& phase,
                        const TrainerConfig& config, PiController* controller);

}  // namespace dsdlab
