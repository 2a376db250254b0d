#include "dsdlab/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>

#include "dsdlab/error.hpp"

namespace dsdlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> names;
  for (const char* a : allowed) names.insert(a);
  for (const auto& [key, value] : j.items())
    if (!names.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
  }
}

// Sizes and counts must be non-negative integers; nlohmann would otherwise
// wrap a negative number silently.
void read_size(const json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError("'" + std::string(key) + "' in " + where + " must be a non-negative integer");
  out = v.get<std::size_t>();
}

std::string read_string(const json& j, const char* key, const std::string& fallback, const std::string& where) {
  std::string s = fallback;
  read(j, key, s, where);
  return s;
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.is_absolute() || base.empty()) return p;
  return base / p;
}

std::vector<std::size_t> read_sizes(const json& j, const char* key, const std::string& where) {
  const json& v = j.at(key);
  if (!v.is_array()) throw ConfigError("'" + std::string(key) + "' in " + where + " must be an array");
  std::vector<std::size_t> out;
  for (const auto& x : v) {
    if (!x.is_number_integer() || x.get<long long>() < 1)
      throw ConfigError("'" + std::string(key) + "' in " + where + " must hold positive integers");
    out.push_back(x.get<std::size_t>());
  }
  return out;
}

Phase parse_phase(const json& j, std::size_t index) {
  const std::string where = "schedule.phases[" + std::to_string(index) + "]";
  check_keys(j, where, {"start", "loss", "optimizer", "lr", "smoothing", "beta"});
  Phase p;
  read_size(j, "start", p.start, where);
  p.loss = parse_loss_kind(read_string(j, "loss", std::string(loss_kind_name(p.loss)), where));
  p.optimizer = parse_optimizer(read_string(j, "optimizer", std::string(optimizer_name(p.optimizer)), where));
  read(j, "lr", p.learning_rate, where);
  read(j, "smoothing", p.smoothing, where);
  read(j, "beta", p.beta, where);
  return p;
}

json phase_json(const Phase& p) {
  return {{"start", p.start},
          {"loss", loss_kind_name(p.loss)},
          {"optimizer", optimizer_name(p.optimizer)},
          {"lr", p.learning_rate},
          {"smoothing", p.smoothing},
          {"beta", p.beta}};
}

json decode_json(const DecodeConfig& d) {
  return {{"mode", decode_mode_name(d.mode)},
          {"beam", d.beam},
          {"max_length", d.max_length},
          {"length_penalty", d.length_penalty}};
}

DecodeConfig parse_decode(const json& j, const std::string& where, DecodeConfig d) {
  check_keys(j, where, {"mode", "beam", "max_length", "length_penalty"});
  d.mode = parse_decode_mode(read_string(j, "mode", std::string(decode_mode_name(d.mode)), where));
  read_size(j, "beam", d.beam, where);
  read_size(j, "max_length", d.max_length, where);
  read(j, "length_penalty", d.length_penalty, where);
  return d;
}

}  // namespace

void RunConfig::apply_seed(std::uint64_t value) {
  seed = value;
  task.seed = value;
  model.seed = value;
  train.seed = value;
}

void RunConfig::validate() const {
  if (model.source_vocab != task.source_vocab || model.target_vocab != task.target_vocab)
    throw ConfigError("model vocabulary sizes must match the task");
  model.validate();
  if (task.max_length > model.max_source_length)
    throw ConfigError("task max_length exceeds the model's max_source_length");
  task.validate(model.max_target_length - 1);
  if (dev_count() == 0 || test_count() == 0) throw ConfigError("dev and test splits must not be empty");
  schedule.validate();
  train.validate();
  for (const auto& p : schedule.phases)
    if (p.loss == LossKind::Cdsd && !train.set_point && p.start == 0)
      throw ConfigError("a cDSD phase at step 0 needs an explicit controller set_point");
  eval.decode.validate();
  for (std::size_t b : eval.beams)
    if (b == 0) throw ConfigError("eval beam widths must be positive");
  for (std::size_t b : eval.beam_sweep)
    if (b == 0) throw ConfigError("beam sweep widths must be positive");
  if (data_dir.empty()) throw ConfigError("data_dir must be set");
  if (out_dir.empty()) throw ConfigError("out_dir must be set");
}

std::size_t RunConfig::dev_count() const { return dev_size > 0 ? dev_size : task.size / 10; }

std::size_t RunConfig::test_count() const { return test_size > 0 ? test_size : task.size / 10; }

RunConfig run_config_from_json(const json& j, const fs::path& base_dir) {
  check_keys(j, "config",
             {"seed", "task", "model", "train", "schedule", "controller", "divergence", "decode", "eval", "data_dir",
              "out_dir"});
  RunConfig c;
  if (!j.contains("seed")) throw ConfigError("config must set 'seed'");
  if (!j.at("seed").is_number_unsigned()) throw ConfigError("'seed' must be a non-negative integer");
  const std::uint64_t seed = j.at("seed").get<std::uint64_t>();

  if (j.contains("task")) {
    const json& t = j.at("task");
    check_keys(t, "task",
               {"kind", "source_vocab", "target_vocab", "min_length", "max_length", "synonyms", "noise", "train_size",
                "dev_size", "test_size"});
    c.task.kind = parse_task_kind(read_string(t, "kind", std::string(task_kind_name(c.task.kind)), "task"));
    read_size(t, "source_vocab", c.task.source_vocab, "task");
    read_size(t, "target_vocab", c.task.target_vocab, "task");
    read_size(t, "min_length", c.task.min_length, "task");
    read_size(t, "max_length", c.task.max_length, "task");
    read_size(t, "synonyms", c.task.synonyms, "task");
    read(t, "noise", c.task.noise, "task");
    read_size(t, "train_size", c.task.size, "task");
    read_size(t, "dev_size", c.dev_size, "task");
    read_size(t, "test_size", c.test_size, "task");
  }
  c.model.source_vocab = c.task.source_vocab;
  c.model.target_vocab = c.task.target_vocab;
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model",
               {"embed_dim", "hidden_dim", "attention_dim", "max_source_length", "max_target_length", "init_scale"});
    read_size(m, "embed_dim", c.model.embed_dim, "model");
    read_size(m, "hidden_dim", c.model.hidden_dim, "model");
    read_size(m, "attention_dim", c.model.attention_dim, "model");
    read_size(m, "max_source_length", c.model.max_source_length, "model");
    read_size(m, "max_target_length", c.model.max_target_length, "model");
    read(m, "init_scale", c.model.init_scale, "model");
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train",
               {"batch_size", "clip_norm", "log_every", "eval_every", "dev_limit", "checkpoint_every",
                "set_point_window", "metric_smoothing", "stop_after"});
    read_size(t, "batch_size", c.train.batch_size, "train");
    read(t, "clip_norm", c.train.clip_norm, "train");
    read_size(t, "log_every", c.train.log_every, "train");
    read_size(t, "eval_every", c.train.eval_every, "train");
    read_size(t, "dev_limit", c.train.dev_limit, "train");
    read_size(t, "checkpoint_every", c.train.checkpoint_every, "train");
    read_size(t, "set_point_window", c.train.set_point_window, "train");
    read(t, "metric_smoothing", c.train.metric_smoothing, "train");
    read_size(t, "stop_after", c.train.stop_after, "train");
  }
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    check_keys(s, "schedule", {"preset", "phases", "total_steps", "switch_rule", "patience", "beta"});
    const std::string preset = read_string(s, "preset", "desk-default", "schedule");
    if (s.contains("phases") && s.contains("preset")) throw ConfigError("schedule takes either 'preset' or 'phases'");
    if (preset == "desk-default") {
      c.schedule = TrainSchedule::desk_default();
    } else if (preset == "osf") {
      c.schedule = TrainSchedule::optimizer_switch_only();
    } else if (preset == "fixed-dsd") {
      double beta = 1.0;
      read(s, "beta", beta, "schedule");
      c.schedule = TrainSchedule::fixed_dsd(beta);
    } else {
      throw ConfigError("unknown schedule preset '" + preset + "'");
    }
    if (s.contains("beta") && preset != "fixed-dsd") throw ConfigError("schedule 'beta' needs preset fixed-dsd");
    if (s.contains("phases")) {
      const json& ps = s.at("phases");
      if (!ps.is_array()) throw ConfigError("schedule.phases must be an array");
      c.schedule.phases.clear();
      for (std::size_t i = 0; i < ps.size(); ++i) c.schedule.phases.push_back(parse_phase(ps[i], i));
    }
    read_size(s, "total_steps", c.schedule.total_steps, "schedule");
    c.schedule.switch_rule =
        parse_switch_rule(read_string(s, "switch_rule", std::string(switch_rule_name(c.schedule.switch_rule)), "schedule"));
    read_size(s, "patience", c.schedule.patience, "schedule");
  }
  if (j.contains("controller")) {
    const json& k = j.at("controller");
    check_keys(k, "controller", {"kp", "ki", "beta_min", "beta_max", "window", "beta_init", "set_point"});
    read(k, "kp", c.train.controller.kp, "controller");
    read(k, "ki", c.train.controller.ki, "controller");
    read(k, "beta_min", c.train.controller.beta_min, "controller");
    read(k, "beta_max", c.train.controller.beta_max, "controller");
    read_size(k, "window", c.train.controller.window, "controller");
    read(k, "beta_init", c.train.controller.beta_init, "controller");
    if (k.contains("set_point") && !k.at("set_point").is_null()) {
      double sp = 0.0;
      read(k, "set_point", sp, "controller");
      c.train.set_point = sp;
    }
  }
  if (j.contains("divergence")) {
    const json& d = j.at("divergence");
    check_keys(d, "divergence", {"alpha", "epsilon", "u_mode"});
    read(d, "alpha", c.train.skew.alpha, "divergence");
    read(d, "epsilon", c.train.skew.epsilon, "divergence");
    c.train.u_mode =
        parse_aggregation(read_string(d, "u_mode", std::string(aggregation_name(c.train.u_mode)), "divergence"));
  }
  if (j.contains("decode")) c.train.decode = parse_decode(j.at("decode"), "decode", c.train.decode);
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, "eval", {"greedy", "beams", "beam_sweep", "max_length", "length_penalty"});
    read(e, "greedy", c.eval.greedy, "eval");
    if (e.contains("beams")) c.eval.beams = read_sizes(e, "beams", "eval");
    if (e.contains("beam_sweep")) c.eval.beam_sweep = read_sizes(e, "beam_sweep", "eval");
    read_size(e, "max_length", c.eval.decode.max_length, "eval");
    read(e, "length_penalty", c.eval.decode.length_penalty, "eval");
  }
  std::string data = c.data_dir.string(), out = c.out_dir.string();
  read(j, "data_dir", data, "config");
  read(j, "out_dir", out, "config");
  c.data_dir = resolve(data, base_dir);
  c.out_dir = resolve(out, base_dir);
  c.apply_seed(seed);
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, fs::absolute(path).parent_path());
}

json run_config_json(const RunConfig& c) {
  json phases = json::array();
  for (const auto& p : c.schedule.phases) phases.push_back(phase_json(p));
  return {{"seed", c.seed},
          {"task",
           {{"kind", task_kind_name(c.task.kind)},
            {"source_vocab", c.task.source_vocab},
            {"target_vocab", c.task.target_vocab},
            {"min_length", c.task.min_length},
            {"max_length", c.task.max_length},
            {"synonyms", c.task.synonyms},
            {"noise", c.task.noise},
            {"train_size", c.task.size},
            {"dev_size", c.dev_size},
            {"test_size", c.test_size}}},
          {"model",
           {{"embed_dim", c.model.embed_dim},
            {"hidden_dim", c.model.hidden_dim},
            {"attention_dim", c.model.attention_dim},
            {"max_source_length", c.model.max_source_length},
            {"max_target_length", c.model.max_target_length},
            {"init_scale", c.model.init_scale}}},
          {"train",
           {{"batch_size", c.train.batch_size},
            {"clip_norm", c.train.clip_norm},
            {"log_every", c.train.log_every},
            {"eval_every", c.train.eval_every},
            {"dev_limit", c.train.dev_limit},
            {"checkpoint_every", c.train.checkpoint_every},
            {"set_point_window", c.train.set_point_window},
            {"metric_smoothing", c.train.metric_smoothing},
            {"stop_after", c.train.stop_after}}},
          {"schedule",
           {{"phases", phases},
            {"total_steps", c.schedule.total_steps},
            {"switch_rule", switch_rule_name(c.schedule.switch_rule)},
            {"patience", c.schedule.patience}}},
          {"controller",
           {{"kp", c.train.controller.kp},
            {"ki", c.train.controller.ki},
            {"beta_min", c.train.controller.beta_min},
            {"beta_max", c.train.controller.beta_max},
            {"window", c.train.controller.window},
            {"beta_init", c.train.controller.beta_init},
            {"set_point", c.train.set_point ? json(*c.train.set_point) : json(nullptr)}}},
          {"divergence",
           {{"alpha", c.train.skew.alpha},
            {"epsilon", c.train.skew.epsilon},
            {"u_mode", aggregation_name(c.train.u_mode)}}},
          {"decode", decode_json(c.train.decode)},
          {"eval",
           {{"greedy", c.eval.greedy},
            {"beams", c.eval.beams},
            {"beam_sweep", c.eval.beam_sweep},
            {"max_length", c.eval.decode.max_length},
            {"length_penalty", c.eval.decode.length_penalty}}},
          {"data_dir", c.data_dir.string()},
          {"out_dir", c.out_dir.string()}};
}

fs::path resolve_out_dir(const RunConfig& config, const std::optional<fs::path>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') return env;
  return config.out_dir;
}

}  // namespace dsdlab
