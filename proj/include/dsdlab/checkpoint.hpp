#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dsdlab/seq2seq.hpp"
#include "dsdlab/tensor.hpp"

namespace dsdlab {

inline constexpr const char* kCheckpointFormat = "dsdlab-checkpoint/1";

// On disk: one line of JSON (the header, with "format" and a "blocks" list of
// {name, shape}), a newline, then every block's values as little-endian
// IEEE-754 float64 in the declared order.
struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> blocks;

  const Tensor& block(const std::string& name) const;
  bool has_block(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_json(const Seq2SeqConfig& config);
Seq2SeqConfig model_config_from_json(const nlohmann::json& j);

// Params-only helpers; the header gains "model" and the blocks carry the
// parameter names.
void add_params(Checkpoint& checkpoint, const Seq2SeqParams& params, const std::string& prefix = "");
Seq2SeqParams params_from_checkpoint(const Checkpoint& checkpoint, const std::string& prefix = "");

}  // namespace dsdlab
