#include "dsdlab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <string>

#include "dsdlab/checkpoint.hpp"
#include "dsdlab/error.hpp"
#include "dsdlab/rng.hpp"

namespace dsdlab {

namespace fs = std::filesystem;
using nlohmann::json;

LossKind parse_loss_kind(std::string_view name) {
  if (name == "xent") return LossKind::Xent;
  if (name == "xent_smooth") return LossKind::XentSmooth;
  if (name == "dsd") return LossKind::Dsd;
  if (name == "cdsd") return LossKind::Cdsd;
  throw ConfigError("unknown loss kind '" + std::string(name) + "'");
}

std::string_view loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::Xent: return "xent";
    case LossKind::XentSmooth: return "xent_smooth";
    case LossKind::Dsd: return "dsd";
    case LossKind::Cdsd: return "cdsd";
  }
  return "?";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

std::string_view optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "sgd"; }

SwitchRule parse_switch_rule(std::string_view name) {
  if (name == "fixed") return SwitchRule::Fixed;
  if (name == "plateau") return SwitchRule::Plateau;
  throw ConfigError("unknown switch rule '" + std::string(name) + "'");
}

std::string_view switch_rule_name(SwitchRule rule) { return rule == SwitchRule::Fixed ? "fixed" : "plateau"; }

void TrainSchedule::validate() const {
  if (phases.empty()) throw ConfigError("schedule needs at least one phase");
  if (phases.front().start != 0) throw ConfigError("first phase must start at step 0");
  for (std::size_t i = 1; i < phases.size(); ++i)
    if (phases[i].start <= phases[i - 1].start) throw ConfigError("phase start steps must strictly increase");
  if (total_steps <= phases.back().start) throw ConfigError("total_steps must exceed the last phase start");
  for (const auto& p : phases) {
    if (!(p.learning_rate >= 0.0) || !std::isfinite(p.learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (!(p.smoothing >= 0.0 && p.smoothing < 1.0)) throw ConfigError("smoothing must lie in [0, 1)");
    if (!(p.beta >= 0.0 && p.beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  }
  if (switch_rule == SwitchRule::Plateau && phases.size() < 2)
    throw ConfigError("plateau switching needs a phase to switch to");
  if (patience < 1) throw ConfigError("patience must be at least 1");
}

TrainSchedule TrainSchedule::desk_default() {
  TrainSchedule s;
  s.phases = {{0, LossKind::XentSmooth, OptimizerKind::Adam, 3e-4, 0.1, 1.0},
              {3000, LossKind::Cdsd, OptimizerKind::Sgd, 0.1, 0.1, 1.0},
              {5000, LossKind::Cdsd, OptimizerKind::Sgd, 0.05, 0.1, 1.0}};
  s.total_steps = 6000;
  return s;
}

TrainSchedule TrainSchedule::optimizer_switch_only() {
  TrainSchedule s = desk_default();
  s.phases[1].loss = LossKind::XentSmooth;
  s.phases[2].loss = LossKind::XentSmooth;
  return s;
}

TrainSchedule TrainSchedule::fixed_dsd(double beta) {
  TrainSchedule s = desk_default();
  for (std::size_t i = 1; i < s.phases.size(); ++i) {
    s.phases[i].loss = LossKind::Dsd;
    s.phases[i].beta = beta;
  }
  return s;
}

void TrainerConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (log_every < 1) throw ConfigError("log_every must be at least 1");
  if (set_point_window < 1) throw ConfigError("set_point_window must be at least 1");
  if (!(metric_smoothing >= 0.0 && metric_smoothing < 1.0)) throw ConfigError("metric smoothing must lie in [0, 1)");
  skew.validate();
  ControllerConfig probe = controller;
  if (set_point) probe.set_point = *set_point;
  probe.validate();
  decode.validate();
}

json metrics_json(const MetricsRecord& r) {
  json j = {{"step", r.step},
            {"phase", r.phase},
            {"loss_kind", loss_kind_name(r.loss_kind)},
            {"optimizer", optimizer_name(r.optimizer)},
            {"lr", r.learning_rate},
            {"loss", r.loss},
            {"xent", r.xent},
            {"nll", r.nll},
            {"u", r.u},
            {"beta", nullptr},
            {"grad_norm", r.grad_norm},
            {"dev_bleu", nullptr}};
  if (r.beta) j["beta"] = *r.beta;
  if (r.dev_bleu) j["dev_bleu"] = *r.dev_bleu;
  return j;
}

StepResult compute_step(const Seq2SeqParams& params, const Batch& batch, const Phase& phase,
                        const TrainerConfig& config, PiController* controller) {
  Tape tape;
  ParamVars pv = bind_params(tape, params, true);
  ForwardTrace trace = forward_teacher_forced(tape, pv, params.config, batch);
  const Tensor& logits = trace.logits.value();

  StepResult out;
  out.xent = cross_entropy(logits, trace.targets, config.metric_smoothing, trace.weights).value;
  LossOutput plain = cross_entropy(logits, trace.targets, 0.0, trace.weights);
  out.nll = plain.value;
  out.u = sample_divergence(logits, trace.targets, config.skew, config.u_mode, trace.sentence);

  LossOutput loss;
  switch (phase.loss) {
    case LossKind::Xent: loss = std::move(plain); break;
    case LossKind::XentSmooth: loss = cross_entropy(logits, trace.targets, phase.smoothing, trace.weights); break;
    case LossKind::Dsd:
      out.beta = phase.beta;
      loss = dsd_loss(logits, trace.targets, config.skew, phase.beta, trace.weights);
      break;
    case LossKind::Cdsd:
      if (controller == nullptr) throw UsageError("cDSD step without a controller");
      out.beta = controller->step(out.u);
      loss = cdsd_loss(logits, trace.targets, config.skew, *out.beta, trace.weights);
      break;
  }
  out.loss = loss.value;
  if (!std::isfinite(out.loss)) throw NumericError("training loss is not finite");

  // d/dlogits of sum(logits * G) is G, which seeds the model backward pass.
  Var root = sum(mul(trace.logits, tape.constant(std::move(loss.grad_logits))));
  tape.backward(root);
  out.grads.reserve(kParamCount);
  for (std::size_t i = 0; i < kParamCount; ++i) out.grads.push_back(tape.grad(pv.vars[i].id));
  return out;
}

double corpus_cross_entropy(const Seq2SeqParams& params, const ParallelCorpus& corpus, double smoothing,
                            std::size_t batch_size, std::size_t limit) {
  const std::size_t n = limit == 0 ? corpus.size() : std::min(limit, corpus.size());
  if (n == 0) throw DataError("cannot score an empty corpus");
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) ids.push_back(i);
    Batch batch = make_batch(corpus, ids);
    Tape tape;
    ParamVars pv = bind_params(tape, params, false);
    ForwardTrace trace = forward_teacher_forced(tape, pv, params.config, batch);
    // Per-sentence token means, summed; divided by n below.
    std::vector<double> w = trace.weights;
    for (double& x : w) x *= static_cast<double>(ids.size());
    total += cross_entropy(trace.logits.value(), trace.targets, smoothing, w).value;
  }
  return total / static_cast<double>(n);
}

double evaluate_hook(const Seq2SeqParams& params, const ParallelCorpus& dev, const DecodeConfig& decode,
                     std::size_t limit) {
  const std::size_t n = limit == 0 ? dev.size() : std::min(limit, dev.size());
  if (n == 0) throw DataError("cannot evaluate on an empty dev corpus");
  std::vector<Sentence> sources, references;
  for (std::size_t i = 0; i < n; ++i) {
    sources.push_back(dev.pairs[i].source);
    references.push_back(dev.pairs[i].target);
  }
  return corpus_bleu(decode_corpus(params, sources, decode), references).score;
}

double evaluate_hook(const fs::path& checkpoint, const ParallelCorpus& dev, const DecodeConfig& decode,
                     std::size_t limit) {
  const Checkpoint ck = read_checkpoint(checkpoint);
  const std::string prefix = ck.has_block("param/source_embedding") ? "param/" : "";
  return evaluate_hook(params_from_checkpoint(ck, prefix), dev, decode, limit);
}

namespace {

constexpr std::uint64_t kEpochStream = 0xe90c;

json controller_state_json(const ControllerState& s) {
  return {{"t", s.t},
          {"integral", s.integral},
          {"last_beta", s.last_beta},
          {"last_error", s.last_error},
          {"window_errors", s.window_errors}};
}

ControllerState controller_state_from_json(const json& j) {
  ControllerState s;
  s.t = j.at("t").get<std::size_t>();
  s.integral = j.at("integral").get<double>();
  s.last_beta = j.at("last_beta").get<double>();
  s.last_error = j.at("last_error").get<double>();
  s.window_errors = j.at("window_errors").get<std::vector<double>>();
  return s;
}

// Everything the loop needs to continue bit-identically.
struct LoopState {
  std::size_t step = 0;
  std::size_t phase = 0;
  bool phase_entered = false;
  std::vector<std::size_t> phase_starts;
  std::size_t total_steps = 0;
  std::size_t epoch = 0;
  std::size_t cursor = 0;
  AdamState adam;
  std::optional<PiController> controller;
  std::optional<double> set_point;
  std::deque<double> ml_window;
  double best_dev_loss = INFINITY;
  std::size_t bad_evals = 0;
  std::map<std::size_t, double> dev_bleu;
};

class Runner {
 public:
  Runner(const Seq2SeqConfig& model, const ParallelCorpus& train, const ParallelCorpus& dev,
         const TrainSchedule& schedule, const TrainerConfig& config, fs::path out_dir)
      : train_(train), dev_(dev), schedule_(schedule), config_(config), out_dir_(std::move(out_dir)) {
    params_ = init_params(model);
    st_.phase_starts.clear();
    for (const auto& p : schedule_.phases) st_.phase_starts.push_back(p.start);
    st_.total_steps = schedule_.total_steps;
  }

  void resume() {
    const fs::path path = out_dir_ / "checkpoints" / "last.ckpt";
    if (!fs::exists(path)) throw DataError("no checkpoint to resume from at " + path.string());
    load(read_checkpoint(path));
    truncate_log(out_dir_ / "metrics.jsonl");
    truncate_log(out_dir_ / "timing.jsonl");
    resumed_ = true;
  }

  TrainResult run() {
    if (!out_dir_.empty()) {
      fs::create_directories(out_dir_ / "checkpoints");
      const auto mode = std::ios::binary | (resumed_ ? std::ios::app : std::ios::trunc);
      metrics_.open(out_dir_ / "metrics.jsonl", mode);
      timing_.open(out_dir_ / "timing.jsonl", mode);
      if (!metrics_ || !timing_) throw IoError("cannot open metrics files in " + out_dir_.string());
    }
    started_ = Clock::now();
    TrainResult result;
    batches_ = batch_iter(train_, config_.batch_size, derive_seed(config_.seed, kEpochStream + st_.epoch));

    while (st_.step < st_.total_steps) {
      enter_due_phase();
      const Phase& phase = schedule_.phases[st_.phase];
      const Batch& batch = batches_[st_.cursor];

      StepResult r;
      try {
        r = compute_step(params_, batch, phase, config_, st_.controller ? &*st_.controller : nullptr);
        const double norm = clip_global_norm(r.grads, config_.clip_norm);
        if (phase.optimizer == OptimizerKind::Adam) adam_step(params_.tensors, r.grads, st_.adam, phase.learning_rate);
        else sgd_step(params_.tensors, r.grads, phase.learning_rate);
        r.grads.clear();
        record_.grad_norm = norm;
      } catch (const NumericError& e) {
        if (!out_dir_.empty()) write_state(out_dir_ / "checkpoints" / "last_good.ckpt");
        throw NumericError("step " + std::to_string(st_.step + 1) + ": " + e.what() +
                           (out_dir_.empty() ? "" : " (last good state saved to checkpoints/last_good.ckpt)"));
      }
      advance_cursor();
      st_.step += 1;

      MetricsRecord rec;
      rec.step = st_.step;
      rec.phase = st_.phase;
      rec.loss_kind = phase.loss;
      rec.optimizer = phase.optimizer;
      rec.learning_rate = phase.learning_rate;
      rec.loss = r.loss;
      rec.xent = r.xent;
      rec.nll = r.nll;
      rec.u = r.u;
      rec.beta = r.beta;
      rec.grad_norm = record_.grad_norm;

      if (st_.phase == 0) {
        st_.ml_window.push_back(r.xent);
        if (st_.ml_window.size() > config_.set_point_window) st_.ml_window.pop_front();
      }

      const bool periodic = config_.eval_every > 0 && st_.step % config_.eval_every == 0;
      if (periodic && st_.phase == 0 && schedule_.switch_rule == SwitchRule::Plateau) check_plateau();
      const bool boundary = st_.phase + 1 < st_.phase_starts.size() && st_.step == st_.phase_starts[st_.phase + 1];
      const bool last = st_.step == st_.total_steps;
      if (periodic || boundary || last) {
        rec.dev_bleu = evaluate_hook(params_, dev_, config_.decode, config_.dev_limit);
        st_.dev_bleu[st_.step] = *rec.dev_bleu;
      }
      rec.wall_clock = std::chrono::duration<double>(Clock::now() - started_).count();
      log(rec);
      result.history.push_back(rec);

      if (boundary || last) {
        write_state(out_dir_ / "checkpoints" / ("step_" + std::to_string(st_.step) + ".ckpt"));
        write_state(out_dir_ / "checkpoints" / "last.ckpt");
      } else if (config_.checkpoint_every > 0 && st_.step % config_.checkpoint_every == 0) {
        write_state(out_dir_ / "checkpoints" / "last.ckpt");
      }
      if (config_.stop_after > 0 && st_.step >= config_.stop_after && !last) {
        write_state(out_dir_ / "checkpoints" / "last.ckpt");
        break;
      }
    }
    if (metrics_.is_open()) metrics_.flush();
    if (timing_.is_open()) timing_.flush();

    result.params = params_;
    result.phase_starts = st_.phase_starts;
    result.dev_bleu = st_.dev_bleu;
    result.set_point = st_.set_point;
    result.steps_done = st_.step;
    result.total_steps = st_.total_steps;
    result.completed = st_.step == st_.total_steps;
    return result;
  }

 private:
  using Clock = std::chrono::steady_clock;

  void enter_due_phase() {
    std::size_t target = st_.phase;
    while (target + 1 < st_.phase_starts.size() && st_.step >= st_.phase_starts[target + 1]) ++target;
    if (target == st_.phase && st_.phase_entered) return;
    const bool changed = target != st_.phase;
    const Phase& prev = schedule_.phases[st_.phase];
    const Phase& next = schedule_.phases[target];
    if (changed && prev.optimizer != next.optimizer) st_.adam.reset();
    if (next.loss == LossKind::Cdsd && !st_.controller) {
      ControllerConfig cc = config_.controller;
      if (config_.set_point) {
        cc.set_point = *config_.set_point;
      } else {
        if (st_.ml_window.empty()) throw ConfigError("cDSD needs a set point or a preceding ML phase to measure one");
        cc.set_point = std::accumulate(st_.ml_window.begin(), st_.ml_window.end(), 0.0) /
                       static_cast<double>(st_.ml_window.size());
      }
      st_.set_point = cc.set_point;
      st_.controller.emplace(cc);
    }
    st_.phase = target;
    st_.phase_entered = true;
  }

  void check_plateau() {
    const double loss = corpus_cross_entropy(params_, dev_, config_.metric_smoothing, 64, config_.dev_limit);
    if (loss < st_.best_dev_loss) {
      st_.best_dev_loss = loss;
      st_.bad_evals = 0;
    } else {
      st_.bad_evals += 1;
    }
    if (st_.bad_evals >= schedule_.patience && st_.step < st_.phase_starts[1]) {
      const std::size_t shift = st_.phase_starts[1] - st_.step;
      for (std::size_t i = 1; i < st_.phase_starts.size(); ++i) st_.phase_starts[i] -= shift;
      st_.total_steps -= shift;
    }
  }

  void advance_cursor() {
    st_.cursor += 1;
    if (st_.cursor == batches_.size()) {
      st_.cursor = 0;
      st_.epoch += 1;
      batches_ = batch_iter(train_, config_.batch_size, derive_seed(config_.seed, kEpochStream + st_.epoch));
    }
  }

  void log(const MetricsRecord& rec) {
    if (out_dir_.empty()) return;
    if (rec.step % config_.log_every == 0 || rec.step == 1 || rec.dev_bleu) {
      metrics_ << metrics_json(rec).dump() << '\n';
      timing_ << json{{"step", rec.step}, {"wall_clock_s", rec.wall_clock}}.dump() << '\n';
    }
  }

  void write_state(const fs::path& path) {
    if (out_dir_.empty()) return;
    if (metrics_.is_open()) metrics_.flush();
    if (timing_.is_open()) timing_.flush();
    Checkpoint ck;
    add_params(ck, params_, "param/");
    json trainer = {{"step", st_.step},
                    {"phase", st_.phase},
                    {"phase_entered", st_.phase_entered},
                    {"phase_starts", st_.phase_starts},
                    {"total_steps", st_.total_steps},
                    {"adam_t", st_.adam.t},
                    {"ml_window", std::vector<double>(st_.ml_window.begin(), st_.ml_window.end())},
                    {"best_dev_loss", std::isfinite(st_.best_dev_loss) ? json(st_.best_dev_loss) : json(nullptr)},
                    {"bad_evals", st_.bad_evals},
                    {"set_point", st_.set_point ? json(*st_.set_point) : json(nullptr)}};
    json bleu = json::array();
    for (const auto& [step, score] : st_.dev_bleu) bleu.push_back({step, score});
    trainer["dev_bleu"] = bleu;
    ck.header["trainer"] = trainer;
    ck.header["schedule_phase"] = st_.phase;
    ck.header["step"] = st_.step;
    ck.header["rng"] = {{"seed", config_.seed}, {"epoch", st_.epoch}, {"cursor", st_.cursor}};
    ck.header["controller"] = st_.controller ? json{{"set_point", st_.controller->config().set_point},
                                                    {"state", controller_state_json(st_.controller->state())}}
                                             : json(nullptr);
    if (!st_.adam.m.empty()) {
      for (std::size_t i = 0; i < kParamCount; ++i) {
        const std::string name(param_name(static_cast<ParamId>(i)));
        ck.blocks.emplace_back("adam_m/" + name, st_.adam.m[i]);
        ck.blocks.emplace_back("adam_v/" + name, st_.adam.v[i]);
      }
    }
    write_checkpoint(path, ck);
  }

  void load(const Checkpoint& ck) {
    Seq2SeqParams loaded = params_from_checkpoint(ck, "param/");
    if (model_config_json(loaded.config) != model_config_json(params_.config))
      throw ConfigError("resume checkpoint was written for a different model config");
    params_ = std::move(loaded);
    const json& t = ck.header.at("trainer");
    st_.step = t.at("step").get<std::size_t>();
    st_.phase = t.at("phase").get<std::size_t>();
    st_.phase_entered = t.at("phase_entered").get<bool>();
    st_.phase_starts = t.at("phase_starts").get<std::vector<std::size_t>>();
    st_.total_steps = t.at("total_steps").get<std::size_t>();
    const auto window = t.at("ml_window").get<std::vector<double>>();
    st_.ml_window.assign(window.begin(), window.end());
    st_.best_dev_loss = t.at("best_dev_loss").is_null() ? INFINITY : t.at("best_dev_loss").get<double>();
    st_.bad_evals = t.at("bad_evals").get<std::size_t>();
    if (!t.at("set_point").is_null()) st_.set_point = t.at("set_point").get<double>();
    for (const auto& entry : t.at("dev_bleu")) st_.dev_bleu[entry.at(0).get<std::size_t>()] = entry.at(1).get<double>();
    const json& rng = ck.header.at("rng");
    st_.epoch = rng.at("epoch").get<std::size_t>();
    st_.cursor = rng.at("cursor").get<std::size_t>();
    st_.adam.reset();
    st_.adam.t = t.at("adam_t").get<std::uint64_t>();
    if (ck.has_block("adam_m/source_embedding")) {
      for (std::size_t i = 0; i < kParamCount; ++i) {
        const std::string name(param_name(static_cast<ParamId>(i)));
        st_.adam.m.push_back(ck.block("adam_m/" + name));
        st_.adam.v.push_back(ck.block("adam_v/" + name));
      }
    }
    const json& c = ck.header.at("controller");
    if (!c.is_null()) {
      ControllerConfig cc = config_.controller;
      cc.set_point = c.at("set_point").get<double>();
      st_.controller.emplace(cc);
      st_.controller->restore(controller_state_from_json(c.at("state")));
    }
  }

  // Drops log lines past the resume step so the continued log matches an
  // uninterrupted run.
  void truncate_log(const fs::path& path) {
    if (!fs::exists(path)) return;
    std::ifstream is(path, std::ios::binary);
    std::string line, kept;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto step = json::parse(line).at("step").get<std::size_t>();
      if (step <= st_.step) kept += line + "\n";
    }
    is.close();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << kept;
  }

  const ParallelCorpus& train_;
  const ParallelCorpus& dev_;
  const TrainSchedule& schedule_;
  const TrainerConfig& config_;
  fs::path out_dir_;
  Seq2SeqParams params_;
  LoopState st_;
  std::vector<Batch> batches_;
  MetricsRecord record_;
  std::ofstream metrics_;
  std::ofstream timing_;
  Clock::time_point started_;
  bool resumed_ = false;
};

}  // namespace

TrainResult train(const Seq2SeqConfig& model, const ParallelCorpus& train_corpus, const ParallelCorpus& dev_corpus,
                  const TrainSchedule& schedule, const TrainerConfig& config, const fs::path& out_dir, bool resume) {
  model.validate();
  schedule.validate();
  config.validate();
  if (train_corpus.empty()) throw DataError("training corpus is empty");
  if (dev_corpus.empty()) throw DataError("dev corpus is empty");
  for (const ParallelCorpus* c : {&train_corpus, &dev_corpus}) {
    if (c->source_vocab > model.source_vocab || c->target_vocab > model.target_vocab)
      throw DataError("corpus vocabulary exceeds the model vocabulary");
    for (const auto& p : c->pairs) {
      if (p.source.size() > model.max_source_length || p.target.size() + 1 > model.max_target_length)
        throw DataError("corpus pair longer than the model maximum lengths");
    }
  }
  if (resume && out_dir.empty()) throw UsageError("resume needs an output directory");
  Runner runner(model, train_corpus, dev_corpus, schedule, config, out_dir);
  if (resume) runner.resume();
  return runner.run();
}

}  // namespace dsdlab
