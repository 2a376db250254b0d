#include "dsdlab/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dsdlab/checkpoint.hpp"
#include "dsdlab/config.hpp"
#include "dsdlab/controller.hpp"
#include "dsdlab/corpus.hpp"
#include "dsdlab/error.hpp"
#include "dsdlab/eval.hpp"
#include "dsdlab/gradsuite.hpp"
#include "dsdlab/trainer.hpp"

namespace dsdlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

RunConfig load_config(const CommonFlags& flags) {
  RunConfig c = load_run_config(flags.config);
  if (flags.seed) c.apply_seed(*flags.seed);
  c.validate();
  return c;
}

std::optional<fs::path> out_flag(const CommonFlags& flags) {
  if (flags.out.empty()) return std::nullopt;
  return fs::path(flags.out);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

std::string fnv1a_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 14];
  while (is.read(buf, sizeof buf) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string format_number(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

std::string sentence_line(const Sentence& s) {
  std::string line;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) line += ' ';
    line += std::to_string(s[i]);
  }
  return line;
}

// ---- generate ----

int cmd_generate(const CommonFlags& flags, std::ostream& out) {
  const RunConfig c = load_config(flags);
  const fs::path dir = flags.out.empty() ? c.data_dir : fs::path(flags.out);
  const ParallelCorpus train = generate_task(c.task, Split::Train, c.task.size);
  const ParallelCorpus dev = generate_task(c.task, Split::Dev, c.dev_count());
  const ParallelCorpus test = generate_task(c.task, Split::Test, c.test_count());

  fs::create_directories(dir);
  save_tsv(train, dir / "train.tsv");
  save_tsv(dev, dir / "dev.tsv");
  save_tsv(test, dir / "test.tsv");
  json vocab = {{"source_vocab", c.task.source_vocab},
                {"target_vocab", c.task.target_vocab},
                {"reserved", {{"pad", kPad}, {"bos", kBos}, {"eos", kEos}, {"unk", kUnk}}},
                {"task", run_config_json(c).at("task")},
                {"seed", c.seed}};
  if (c.task.kind == TaskKind::SynonymNoise) vocab["synonyms"] = synonym_map(c.task);
  write_text(dir / "vocab.json", vocab.dump(2) + "\n");
  out << json{{"data_dir", dir.string()},
              {"train", train.size()},
              {"dev", dev.size()},
              {"test", test.size()}}.dump()
      << "\n";
  return kExitOk;
}

// ---- train ----

struct Corpora {
  ParallelCorpus train;
  ParallelCorpus dev;
};

Corpora load_training_data(const RunConfig& c) {
  Corpora d;
  for (const char* name : {"train.tsv", "dev.tsv"})
    if (!fs::exists(c.data_dir / name))
      throw DataError("missing " + (c.data_dir / name).string() + "; run the generate subcommand first");
  d.train = load_tsv(c.data_dir / "train.tsv");
  d.dev = load_tsv(c.data_dir / "dev.tsv");
  for (const ParallelCorpus* corpus : {&d.train, &d.dev})
    if (corpus->source_vocab > c.model.source_vocab || corpus->target_vocab > c.model.target_vocab)
      throw DataError("corpus ids exceed the configured vocabulary");
  return d;
}

json data_inventory(const RunConfig& c) {
  json files = json::object();
  for (const char* name : {"train.tsv", "dev.tsv", "test.tsv", "vocab.json"}) {
    const fs::path p = c.data_dir / name;
    if (fs::exists(p)) files[name] = {{"path", p.string()}, {"fnv1a64", fnv1a_file(p)}};
  }
  return files;
}

json planned_outputs(const RunConfig& c) {
  json ckpts = json::array();
  for (std::size_t i = 1; i < c.schedule.phases.size(); ++i)
    ckpts.push_back("checkpoints/step_" + std::to_string(c.schedule.phases[i].start) + ".ckpt");
  ckpts.push_back("checkpoints/step_" + std::to_string(c.schedule.total_steps) + ".ckpt");
  ckpts.push_back("checkpoints/last.ckpt");
  return {{"config", "config.json"},
          {"metrics", "metrics.jsonl"},
          {"timing", "timing.jsonl"},
          {"status", "status.json"},
          {"checkpoints", ckpts},
          {"eval_dir", "eval"}};
}

json output_inventory(const fs::path& dir) {
  json files = json::array();
  if (!fs::exists(dir)) return files;
  std::vector<std::string> names;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) names.push_back(fs::relative(entry.path(), dir).generic_string());
  std::sort(names.begin(), names.end());
  for (const auto& n : names) files.push_back(n);
  return files;
}

struct RunSummary {
  TrainResult result;
  fs::path dir;
};

RunSummary run_training(const RunConfig& c, const Corpora& data, const fs::path& dir, bool resume) {
  const json snapshot = run_config_json(c);
  if (resume) {
    const fs::path saved = dir / "config.json";
    if (!fs::exists(saved)) throw DataError("nothing to resume in " + dir.string());
    std::ifstream is(saved);
    RunConfig previous = run_config_from_json(json::parse(is));
    json prev = run_config_json(previous), now = snapshot;
    prev["train"].erase("stop_after");
    now["train"].erase("stop_after");
    if (prev != now) throw ConfigError("config differs from the run being resumed in " + dir.string());
  } else {
    if (fs::exists(dir / "manifest.json"))
      throw UsageError(dir.string() + " already holds a run; pass --resume or choose another --out");
    fs::create_directories(dir);
    json manifest = {{"version", kVersionTag},
                     {"started", utc_now()},
                     {"seed", c.seed},
                     {"config", snapshot},
                     {"data", data_inventory(c)},
                     {"outputs", planned_outputs(c)}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    write_text(dir / "config.json", snapshot.dump(2) + "\n");
  }
  RunSummary s{{}, dir};
  try {
    s.result = train(c.model, data.train, data.dev, c.schedule, c.train, dir, resume);
  } catch (const std::exception& e) {
    json status = {{"state", "failed"}, {"error", e.what()}, {"files", output_inventory(dir)}};
    write_text(dir / "status.json", status.dump(2) + "\n");
    throw;
  }
  json bleu = json::array();
  for (const auto& [step, score] : s.result.dev_bleu) bleu.push_back({{"step", step}, {"dev_bleu", score}});
  json status = {{"state", s.result.completed ? "completed" : "stopped"},
                 {"steps_done", s.result.steps_done},
                 {"total_steps", s.result.total_steps},
                 {"phase_starts", s.result.phase_starts},
                 {"set_point", s.result.set_point ? json(*s.result.set_point) : json(nullptr)},
                 {"dev_bleu", bleu},
                 {"files", json::array()}};
  write_text(dir / "status.json", status.dump(2) + "\n");
  status["files"] = output_inventory(dir);
  write_text(dir / "status.json", status.dump(2) + "\n");
  return s;
}

json run_line(const RunSummary& s) {
  json j = {{"out", s.dir.string()},
            {"completed", s.result.completed},
            {"steps", s.result.steps_done},
            {"set_point", s.result.set_point ? json(*s.result.set_point) : json(nullptr)},
            {"final_dev_bleu", nullptr}};
  if (!s.result.dev_bleu.empty()) j["final_dev_bleu"] = s.result.dev_bleu.rbegin()->second;
  return j;
}

// Every phase after the first becomes a fixed-beta DSD phase.
RunConfig with_fixed_beta(RunConfig c, double beta) {
  for (std::size_t i = 1; i < c.schedule.phases.size(); ++i) {
    c.schedule.phases[i].loss = LossKind::Dsd;
    c.schedule.phases[i].beta = beta;
  }
  return c;
}

int cmd_train(const CommonFlags& flags, bool beta_sweep, bool resume, std::ostream& out) {
  const RunConfig c = load_config(flags);
  const fs::path dir = resolve_out_dir(c, out_flag(flags));
  if (beta_sweep && c.schedule.phases.size() < 2) throw ConfigError("beta sweep needs a phase after the ML phase");
  const Corpora data = load_training_data(c);

  if (!beta_sweep) {
    out << run_line(run_training(c, data, dir, resume)).dump() << "\n";
    return kExitOk;
  }
  std::vector<RunConfig> runs;
  for (double beta : {0.0, 0.5, 1.0}) {
    RunConfig sub = with_fixed_beta(c, beta);
    sub.out_dir = dir / ("beta_" + format_number(beta));
    sub.validate();
    runs.push_back(std::move(sub));
  }
  json rows = json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const RunSummary s = run_training(runs[i], data, runs[i].out_dir, resume);
    json line = run_line(s);
    line["beta"] = runs[i].schedule.phases[1].beta;
    if (s.result.phase_starts.size() > 1 && s.result.dev_bleu.count(s.result.phase_starts[1]))
      line["switch_dev_bleu"] = s.result.dev_bleu.at(s.result.phase_starts[1]);
    out << line.dump() << "\n";
    rows.push_back(line);
  }
  write_text(dir / "sweep.json", rows.dump(2) + "\n");
  return kExitOk;
}

// ---- eval ----

Seq2SeqParams load_model(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path.string());
  const Checkpoint ck = read_checkpoint(path);
  const std::string prefix = ck.has_block("param/source_embedding") ? "param/" : "";
  return params_from_checkpoint(ck, prefix);
}

std::vector<Sentence> read_decodes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read decode file " + path.string());
  std::vector<Sentence> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    Sentence s;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
      Token id = 0;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), id);
      if (ec != std::errc() || ptr != tok.data() + tok.size()) throw ParseError("bad token '" + tok + "'", number);
      s.push_back(id);
    }
    out.push_back(std::move(s));
  }
  return out;
}

json bleu_json(const BleuReport& r) {
  return {{"bleu", r.score},
          {"precisions", r.precisions},
          {"brevity_penalty", r.brevity_penalty},
          {"hypothesis_length", r.hypothesis_length},
          {"reference_length", r.reference_length}};
}

struct EvalFlags {
  std::string checkpoint;
  std::string corpus;
  std::string compare;
  std::size_t beam = 0;
  bool beam_sweep = false;
};

int cmd_eval(const CommonFlags& flags, const EvalFlags& ef, std::ostream& out) {
  const RunConfig c = load_config(flags);
  const fs::path run_dir = resolve_out_dir(c, std::nullopt);
  const fs::path ckpt = ef.checkpoint.empty() ? run_dir / "checkpoints" / "last.ckpt" : fs::path(ef.checkpoint);
  const fs::path corpus_path = ef.corpus.empty() ? c.data_dir / "test.tsv" : fs::path(ef.corpus);
  const fs::path dir = flags.out.empty() ? run_dir / "eval" : fs::path(flags.out);

  const Seq2SeqParams params = load_model(ckpt);
  if (!fs::exists(corpus_path)) throw DataError("corpus not found: " + corpus_path.string());
  const ParallelCorpus corpus = load_tsv(corpus_path);
  if (corpus.source_vocab > params.config.source_vocab || corpus.target_vocab > params.config.target_vocab)
    throw DataError("vocabulary mismatch: corpus ids exceed the checkpoint's vocabulary (source " +
                    std::to_string(corpus.source_vocab) + " vs " + std::to_string(params.config.source_vocab) +
                    ", target " + std::to_string(corpus.target_vocab) + " vs " +
                    std::to_string(params.config.target_vocab) + ")");
  std::optional<std::vector<Sentence>> baseline;
  if (!ef.compare.empty()) {
    baseline = read_decodes(ef.compare);
    if (baseline->size() != corpus.size())
      throw DataError("comparison decode file has " + std::to_string(baseline->size()) + " lines, corpus has " +
                      std::to_string(corpus.size()));
  }
  std::vector<Sentence> sources, references;
  for (const auto& p : corpus.pairs) {
    sources.push_back(p.source);
    references.push_back(p.target);
  }

  std::vector<DecodeConfig> modes;
  DecodeConfig base = c.eval.decode;
  if (c.eval.greedy) {
    base.mode = DecodeMode::Greedy;
    base.beam = 1;
    modes.push_back(base);
  }
  std::vector<std::size_t> beams = ef.beam > 0 ? std::vector<std::size_t>{ef.beam} : c.eval.beams;
  for (std::size_t b : beams) {
    base.mode = DecodeMode::Beam;
    base.beam = b;
    base.validate();
    modes.push_back(base);
  }
  if (modes.empty()) throw ConfigError("eval has no decode mode enabled");

  fs::create_directories(dir);
  json reports = json::array();
  std::vector<Sentence> primary;
  for (const auto& mode : modes) {
    const std::vector<Sentence> hyps = decode_corpus(params, sources, mode);
    const std::string name =
        mode.mode == DecodeMode::Greedy ? "greedy" : "beam" + std::to_string(mode.beam);
    std::string text;
    for (const auto& h : hyps) text += sentence_line(h) + "\n";
    write_text(dir / ("decodes_" + name + ".txt"), text);
    json r = bleu_json(corpus_bleu(hyps, references));
    r["mode"] = decode_mode_name(mode.mode);
    r["beam"] = mode.beam;
    r["decodes"] = "decodes_" + name + ".txt";
    reports.push_back(r);
    if (primary.empty()) primary = hyps;
  }
  json report = {{"checkpoint", ckpt.string()},
                 {"corpus", corpus_path.string()},
                 {"sentences", corpus.size()},
                 {"reports", reports}};
  if (ef.beam_sweep) {
    json rows = json::array();
    for (std::size_t b : c.eval.beam_sweep) {
      DecodeConfig d = c.eval.decode;
      d.mode = DecodeMode::Beam;
      d.beam = b;
      json row = bleu_json(corpus_bleu(decode_corpus(params, sources, d), references));
      row["beam"] = b;
      rows.push_back(row);
      out << json{{"beam", b}, {"bleu", row["bleu"]}}.dump() << "\n";
    }
    report["beam_sweep"] = rows;
    write_text(dir / "beam_sweep.json", rows.dump(2) + "\n");
  }
  if (baseline) {
    const SignTestResult st = paired_sign_test(primary, *baseline, references);
    json sign = {{"system", reports[0]["decodes"]},
                 {"baseline", ef.compare},
                 {"wins", st.wins},
                 {"losses", st.losses},
                 {"ties", st.ties},
                 {"p_value", st.p_value}};
    report["sign_test"] = sign;
    write_text(dir / "sign_test.json", sign.dump(2) + "\n");
  }
  write_text(dir / "report.json", report.dump(2) + "\n");
  for (const auto& r : reports)
    out << json{{"mode", r["mode"]}, {"beam", r["beam"]}, {"bleu", r["bleu"]}}.dump() << "\n";
  if (report.contains("sign_test")) out << report["sign_test"].dump() << "\n";
  return kExitOk;
}

// ---- gradcheck ----

int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out) {
  const GradcheckReport report = run_gradcheck(opt);
  for (const auto& line : report.lines) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-24s cases=%-4zu max_rel_error=%.3e %s", line.name.c_str(), line.cases,
                  line.max_error, line.pass ? "PASS" : "FAIL");
    out << buf << "\n";
  }
  out << (report.pass() ? "gradcheck: all checks below " : "gradcheck: FAILED, threshold ")
      << format_number(opt.threshold) << "\n";
  return report.pass() ? kExitOk : kExitCheckFailed;
}

// ---- controller-sim ----

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// One u value per line; an optional first line "u" is a header.
std::vector<double> read_u_csv(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::vector<double> u;
  std::string line;
  std::size_t number = 0;
  bool seen = false;
  while (std::getline(is, line)) {
    ++number;
    const std::string cell = trim(line);
    if (cell.empty()) continue;
    if (!seen && cell == "u") {
      seen = true;
      continue;
    }
    seen = true;
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
    if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(value))
      throw ParseError("expected one finite number, got '" + cell + "'", number);
    u.push_back(value);
  }
  if (u.empty()) throw DataError(path.string() + " holds no u values");
  return u;
}

struct SimFlags {
  std::string input;
  std::optional<double> set_point;
};

int cmd_controller_sim(const CommonFlags& flags, const SimFlags& sf, std::ostream& out) {
  ControllerConfig cc;
  if (!flags.config.empty()) {
    const RunConfig c = load_config(flags);
    cc = c.train.controller;
    if (c.train.set_point) cc.set_point = *c.train.set_point;
  }
  if (sf.set_point) cc.set_point = *sf.set_point;
  cc.validate();
  const std::vector<double> u = read_u_csv(sf.input);
  std::string text = "t,u,e,beta\n";
  char buf[128];
  for (const auto& s : simulate(cc, u)) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", s.t, s.u, s.error, s.beta);
    text += buf;
  }
  if (flags.out.empty()) out << text;
  else write_text(flags.out, text);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Seq2seq lab for dual skew divergence training", "dsdlab"};
  app.require_subcommand(1);
  CommonFlags flags;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", flags.config, "run config JSON");
    if (config_required) opt->required();
    sub->add_option("--out", flags.out, "output directory (file for controller-sim)");
    sub->add_option("--seed", flags.seed, "override the config seed");
  };

  auto* generate = app.add_subcommand("generate", "write train/dev/test TSVs and vocab.json");
  add_common(generate, true);

  bool beta_sweep = false, resume = false;
  auto* train = app.add_subcommand("train", "run the training schedule");
  add_common(train, true);
  train->add_flag("--beta-sweep", beta_sweep, "fixed-beta DSD runs for beta in {0, 0.5, 1}");
  train->add_flag("--resume", resume, "continue from checkpoints/last.ckpt");

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "decode a corpus and report BLEU");
  add_common(eval, true);
  eval->add_option("--checkpoint", ef.checkpoint, "checkpoint (default: run's checkpoints/last.ckpt)");
  eval->add_option("--corpus", ef.corpus, "TSV corpus (default: data_dir/test.tsv)");
  eval->add_option("--beam", ef.beam, "beam width for the beam report")->check(CLI::PositiveNumber);
  eval->add_flag("--beam-sweep", ef.beam_sweep, "one row per beam width in eval.beam_sweep");
  eval->add_option("--compare", ef.compare, "baseline decode file for a paired sign test");

  GradcheckOptions gopt;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of every loss and the model");
  gradcheck->add_option("--seed", gopt.seed, "seed of the random batches");
  gradcheck->add_option("--batches", gopt.batches, "random batches per loss")->check(CLI::PositiveNumber);
  gradcheck->add_option("--corrupt", gopt.corrupt, "scale analytic gradients by (1 + x)")->group("");

  SimFlags sf;
  auto* sim = app.add_subcommand("controller-sim", "replay the controller on a CSV of u values");
  add_common(sim, false);
  sim->add_option("--input", sf.input, "CSV with one u value per line")->required();
  sim->add_option("--set-point", sf.set_point, "controller set point u*");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "dsdlab: " << e.what() << "\n";
    return kExitValidation;
  }

  try {
    if (generate->parsed()) return cmd_generate(flags, out);
    if (train->parsed()) return cmd_train(flags, beta_sweep, resume, out);
    if (eval->parsed()) return cmd_eval(flags, ef, out);
    if (gradcheck->parsed()) return cmd_gradcheck(gopt, out);
    if (sim->parsed()) return cmd_controller_sim(flags, sf, out);
  } catch (const ConfigError& e) {
    err << "dsdlab: config error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DataError& e) {
    err << "dsdlab: data error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const UsageError& e) {
    err << "dsdlab: usage error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DimensionError& e) {
    err << "dsdlab: dimension error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericError& e) {
    err << "dsdlab: numeric error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const IoError& e) {
    err << "dsdlab: i/o error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "dsdlab: error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace dsdlab
