#include "dsdlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "dsdlab/error.hpp"

namespace dsdlab {

namespace {

void put_le(std::ostream& os, double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(bytes, 8);
}

double get_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

const Tensor& Checkpoint::block(const std::string& name) const {
  for (const auto& [n, t] : blocks)
    if (n == name) return t;
  throw DataError("checkpoint has no block '" + name + "'");
}

bool Checkpoint::has_block(const std::string& name) const {
  for (const auto& entry : blocks)
    if (entry.first == name) return true;
  return false;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json header = checkpoint.header;
  header["format"] = kCheckpointFormat;
  header["blocks"] = nlohmann::json::array();
  for (const auto& [name, t] : checkpoint.blocks) header["blocks"].push_back({{"name", name}, {"shape", t.shape()}});
  // Write to a sibling temp file first so an interrupted write never clobbers
  // the previous checkpoint.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp + " for writing");
    os << header.dump() << '\n';
    for (const auto& entry : checkpoint.blocks)
      for (double v : entry.second.data()) put_le(os, v);
    if (!os) throw IoError("write to " + tmp + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError("checkpoint " + path.string() + " has no header");
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  if (ck.header.value("format", "") != kCheckpointFormat)
    throw DataError("unsupported checkpoint format '" + ck.header.value("format", "") + "'");
  std::vector<unsigned char> buf(8);
  for (const auto& b : ck.header.at("blocks")) {
    Tensor t(b.at("shape").get<std::vector<std::size_t>>());
    for (double& v : t.data()) {
      if (!is.read(reinterpret_cast<char*>(buf.data()), 8)) throw DataError("checkpoint truncated in block " + b.at("name").get<std::string>());
      v = get_le(buf.data());
    }
    ck.blocks.emplace_back(b.at("name").get<std::string>(), std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint has trailing bytes");
  return ck;
}

nlohmann::json model_config_json(const Seq2SeqConfig& c) {
  return {{"source_vocab", c.source_vocab},       {"target_vocab", c.target_vocab},
          {"embed_dim", c.embed_dim},             {"hidden_dim", c.hidden_dim},
          {"attention_dim", c.attention_dim},     {"max_source_length", c.max_source_length},
          {"max_target_length", c.max_target_length}, {"seed", c.seed},
          {"init_scale", c.init_scale}};
}

Seq2SeqConfig model_config_from_json(const nlohmann::json& j) {
  Seq2SeqConfig c;
  c.source_vocab = j.value("source_vocab", c.source_vocab);
  c.target_vocab = j.value("target_vocab", c.target_vocab);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.attention_dim = j.value("attention_dim", c.attention_dim);
  c.max_source_length = j.value("max_source_length", c.max_source_length);
  c.max_target_length = j.value("max_target_length", c.max_target_length);
  c.seed = j.value("seed", c.seed);
  c.init_scale = j.value("init_scale", c.init_scale);
  return c;
}

void add_params(Checkpoint& checkpoint, const Seq2SeqParams& params, const std::string& prefix) {
  checkpoint.header["model"] = model_config_json(params.config);
  for (std::size_t i = 0; i < kParamCount; ++i)
    checkpoint.blocks.emplace_back(prefix + std::string(param_name(static_cast<ParamId>(i))), params.tensors[i]);
}

Seq2SeqParams params_from_checkpoint(const Checkpoint& checkpoint, const std::string& prefix) {
  if (!checkpoint.header.contains("model")) throw DataError("checkpoint has no model config");
  Seq2SeqParams params{model_config_from_json(checkpoint.header.at("model")), {}};
  params.config.validate();
  for (std::size_t i = 0; i < kParamCount; ++i)
    params.tensors.push_back(checkpoint.block(prefix + std::string(param_name(static_cast<ParamId>(i)))));
  check_params(params);
  return params;
}

}  // namespace dsdlab
