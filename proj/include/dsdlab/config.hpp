#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "json.hpp"

#include "dsdlab/corpus.hpp"
#include "dsdlab/eval.hpp"
#include "dsdlab/seq2seq.hpp"
#include "dsdlab/trainer.hpp"

namespace dsdlab {

inline constexpr const char* kOutDirEnv = "DSDLAB_OUT_DIR";
inline constexpr const char* kVersionTag = "dsdlab 1.0";

struct EvalConfig {
  bool greedy = true;
  std::vector<std::size_t> beams = {5};                  // one beam report per width
  std::vector<std::size_t> beam_sweep = {1, 3, 5, 25, 100};
  DecodeConfig decode;                                   // max_length and length_penalty for eval decodes
};

// Everything one experiment needs. Relative paths resolve against the
// directory of the config file.
struct RunConfig {
  std::uint64_t seed = 1;
  TaskSpec task;
  std::size_t dev_size = 0;   // 0: a tenth of the training size
  std::size_t test_size = 0;
  Seq2SeqConfig model;
  TrainSchedule schedule = TrainSchedule::desk_default();
  TrainerConfig train;
  EvalConfig eval;
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "runs/default";

  // Propagates `seed` into the task, model init and trainer.
  void apply_seed(std::uint64_t value);
  void validate() const;
  std::size_t dev_count() const;
  std::size_t test_count() const;
};

// Strict parse: unknown keys and a missing seed are config errors.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json run_config_json(const RunConfig& config);

// Precedence: explicit flag, then the environment variable, then the config.
std::filesystem::path resolve_out_dir(const RunConfig& config, const std::optional<std::filesystem::path>& flag);

}  // namespace dsdlab
