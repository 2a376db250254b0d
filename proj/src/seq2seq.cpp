#include "dsdlab/seq2seq.hpp"

#include <cmath>
#include <string>

#include "dsdlab/error.hpp"
#include "dsdlab/rng.hpp"

namespace dsdlab {

namespace {

constexpr double kMaskedScore = -1e30;

constexpr std::array<std::string_view, kParamCount> kNames = {
    "source_embedding", "target_embedding",
    "enc_fwd.z", "enc_fwd.z_bias", "enc_fwd.r", "enc_fwd.r_bias", "enc_fwd.n", "enc_fwd.n_bias",
    "enc_bwd.z", "enc_bwd.z_bias", "enc_bwd.r", "enc_bwd.r_bias", "enc_bwd.n", "enc_bwd.n_bias",
    "dec.z", "dec.z_bias", "dec.r", "dec.r_bias", "dec.n", "dec.n_bias",
    "init_state", "init_state_bias",
    "attn.state", "attn.annotation", "attn.bias", "attn.score",
    "output", "output_bias",
};

// Gate blocks for one GRU starting at `first` (z, z_bias, r, r_bias, n, n_bias).
Var gru_cell(const ParamVars& p, std::size_t first, Var x, Var h) {
  auto w = [&](std::size_t k) { return p.vars[first + k]; };
  const std::array<Var, 2> xh_parts{x, h};
  Var xh = concat(xh_parts, 1);
  Var z = sigmoid(add(matmul(xh, w(0)), w(1)));
  Var r = sigmoid(add(matmul(xh, w(2)), w(3)));
  const std::array<Var, 2> xrh_parts{x, mul(r, h)};
  Var n = tanh(add(matmul(concat(xrh_parts, 1), w(4)), w(5)));
  // (1 - z) * n + z * h
  return add(n, mul(z, sub(h, n)));
}

// keep * fresh + (1 - keep) * old, exact when keep is 0 or 1.
Var masked_update(Tape& tape, Var fresh, Var old, const std::vector<double>& keep) {
  const std::size_t b = keep.size();
  std::vector<double> inverse(b);
  for (std::size_t i = 0; i < b; ++i) inverse[i] = 1.0 - keep[i];
  Var k = tape.constant(Tensor({b, 1}, keep));
  Var ik = tape.constant(Tensor({b, 1}, inverse));
  return add(mul(fresh, k), mul(old, ik));
}

void check_tokens(std::span<const Token> tokens, std::size_t vocab, const char* side) {
  for (Token t : tokens)
    if (t >= vocab)
      throw DataError(std::string(side) + " token " + std::to_string(t) + " outside vocabulary of " +
                      std::to_string(vocab));
}

}  // namespace

void Seq2SeqConfig::validate() const {
  if (source_vocab < 4 || target_vocab < 4) throw ConfigError("model vocabularies must include the 4 reserved ids");
  if (embed_dim < 1 || hidden_dim < 1 || attention_dim < 1) throw ConfigError("model dimensions must be >= 1");
  if (max_source_length < 1 || max_target_length < 1) throw ConfigError("model max lengths must be >= 1");
  if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be nonnegative");
}

std::string_view param_name(ParamId id) { return kNames.at(id); }

std::size_t Seq2SeqParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

std::vector<std::vector<std::size_t>> param_shapes(const Seq2SeqConfig& c) {
  const std::size_t e = c.embed_dim, h = c.hidden_dim, a = c.attention_dim;
  std::vector<std::vector<std::size_t>> s(kParamCount);
  s[kSourceEmbedding] = {c.source_vocab, e};
  s[kTargetEmbedding] = {c.target_vocab, e};
  for (std::size_t base : {std::size_t{kEncFwdZ}, std::size_t{kEncBwdZ}, std::size_t{kDecZ}}) {
    const std::size_t in = base == kDecZ ? e + 2 * h : e;
    for (std::size_t g = 0; g < 3; ++g) {
      s[base + 2 * g] = {in + h, h};
      s[base + 2 * g + 1] = {1, h};
    }
  }
  s[kInitState] = {h, h};
  s[kInitStateBias] = {1, h};
  s[kAttnState] = {h, a};
  s[kAttnAnnotation] = {2 * h, a};
  s[kAttnBias] = {1, a};
  s[kAttnScore] = {a, 1};
  s[kOutput] = {h + 2 * h + e, c.target_vocab};
  s[kOutputBias] = {1, c.target_vocab};
  return s;
}

Seq2SeqParams init_params(const Seq2SeqConfig& config) {
  config.validate();
  Seq2SeqParams params{config, {}};
  Rng rng(derive_seed(config.seed, 0x9a));
  for (auto& shape : param_shapes(config)) {
    Tensor t(shape);
    for (double& v : t.data()) v = rng.uniform(-config.init_scale, config.init_scale);
    params.tensors.push_back(std::move(t));
  }
  return params;
}

void check_params(const Seq2SeqParams& params) {
  const auto shapes = param_shapes(params.config);
  if (params.tensors.size() != shapes.size()) throw DimensionError("parameter block count mismatch");
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (params.tensors[i].shape() != shapes[i])
      throw DimensionError("parameter " + std::string(kNames[i]) + " has shape " +
                           params.tensors[i].shape_string());
}

ParamVars bind_params(Tape& tape, const Seq2SeqParams& params, bool trainable) {
  ParamVars pv;
  for (std::size_t i = 0; i < kParamCount; ++i)
    pv.vars[i] = trainable ? tape.leaf(params.tensors[i]) : tape.constant(params.tensors[i]);
  return pv;
}

EncoderGraph encode_graph(Tape& tape, const ParamVars& p, const Seq2SeqConfig& config,
                          std::span<const Token> source, std::size_t batch, std::size_t width,
                          std::span<const std::size_t> lengths) {
  if (batch == 0 || width == 0) throw DataError("empty source batch");
  if (source.size() != batch * width || lengths.size() != batch) throw DimensionError("source batch shape mismatch");
  if (width > config.max_source_length) throw DataError("source longer than the model maximum");
  check_tokens(source, config.source_vocab, "source");
  for (std::size_t b = 0; b < batch; ++b) {
    if (lengths[b] == 0 || lengths[b] > width) throw DataError("source length out of range");
    for (std::size_t i = 0; i < lengths[b]; ++i)
      if (source[b * width + i] == kPad) throw DataError("PAD inside the unpadded source extent");
  }

  const std::size_t h = config.hidden_dim;
  std::vector<Var> embedded(width);
  std::vector<std::vector<double>> keep(width, std::vector<double>(batch));
  std::vector<bool> padded(width, false);
  for (std::size_t i = 0; i < width; ++i) {
    std::vector<std::size_t> ids(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      ids[b] = source[b * width + i];
      keep[i][b] = i < lengths[b] ? 1.0 : 0.0;
      if (i >= lengths[b]) padded[i] = true;
    }
    embedded[i] = gather(p[kSourceEmbedding], ids);
  }

  Var zero = tape.constant(Tensor::matrix(batch, h));
  std::vector<Var> fwd(width), bwd(width);
  Var state = zero;
  for (std::size_t i = 0; i < width; ++i) {
    Var next = gru_cell(p, kEncFwdZ, embedded[i], state);
    state = padded[i] ? masked_update(tape, next, state, keep[i]) : next;
    fwd[i] = state;
  }
  state = zero;
  for (std::size_t i = width; i-- > 0;) {
    Var next = gru_cell(p, kEncBwdZ, embedded[i], state);
    state = padded[i] ? masked_update(tape, next, state, keep[i]) : next;
    bwd[i] = state;
  }

  EncoderGraph enc;
  for (std::size_t i = 0; i < width; ++i) {
    const std::array<Var, 2> parts{fwd[i], bwd[i]};
    enc.annotations.push_back(concat(parts, 1));
    enc.projected.push_back(matmul(enc.annotations.back(), p[kAttnAnnotation]));
  }
  enc.initial_state = tanh(add(matmul(bwd[0], p[kInitState]), p[kInitStateBias]));
  enc.has_padding = false;
  Tensor mask = Tensor::matrix(batch, width);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = lengths[b]; i < width; ++i) {
      mask(b, i) = kMaskedScore;
      enc.has_padding = true;
    }
  enc.score_mask = tape.constant(std::move(mask));
  return enc;
}

EncoderGraph replicate(const EncoderGraph& enc, std::size_t copies) {
  if (enc.initial_state.value().rows() != 1) throw UsageError("replicate expects a batch-1 encoding");
  const std::vector<std::size_t> rows(copies, 0);
  EncoderGraph out;
  for (const Var& a : enc.annotations) out.annotations.push_back(gather(a, rows));
  for (const Var& a : enc.projected) out.projected.push_back(gather(a, rows));
  out.initial_state = gather(enc.initial_state, rows);
  out.score_mask = gather(enc.score_mask, rows);
  out.has_padding = enc.has_padding;
  return out;
}

AttentionGraph attend_graph(const ParamVars& p, Var state, const EncoderGraph& enc) {
  if (enc.annotations.empty()) throw DimensionError("attention over zero source positions");
  const Tensor& s = state.value();
  if (s.cols() != p[kAttnState].value().rows())
    throw DimensionError("decoder state width " + std::to_string(s.cols()) + " does not match attention");
  if (enc.annotations.front().value().rows() != s.rows())
    throw DimensionError("decoder state batch does not match annotations");
  Var query = add(matmul(state, p[kAttnState]), p[kAttnBias]);
  std::vector<Var> scores;
  scores.reserve(enc.projected.size());
  for (const Var& proj : enc.projected) scores.push_back(matmul(tanh(add(proj, query)), p[kAttnScore]));
  Var logits = concat(scores, 1);
  if (enc.has_padding) logits = add(logits, enc.score_mask);
  Var weights = softmax(logits);
  Var context = mul(enc.annotations[0], slice_cols(weights, 0, 1));
  for (std::size_t i = 1; i < enc.annotations.size(); ++i)
    context = add(context, mul(enc.annotations[i], slice_cols(weights, i, 1)));
  return {context, weights};
}

StepGraph decode_step_graph(const ParamVars& p, const Seq2SeqConfig& config, std::span<const Token> previous,
                            Var state, const EncoderGraph& enc) {
  check_tokens(previous, config.target_vocab, "target");
  const std::vector<std::size_t> ids(previous.begin(), previous.end());
  Var embedded = gather(p[kTargetEmbedding], ids);
  AttentionGraph att = attend_graph(p, state, enc);
  const std::array<Var, 2> input{embedded, att.context};
  Var next = gru_cell(p, kDecZ, concat(input, 1), state);
  const std::array<Var, 3> readout{next, att.context, embedded};
  Var logits = add(matmul(concat(readout, 1), p[kOutput]), p[kOutputBias]);
  return {next, logits, att.weights};
}

Annotations encode(const Seq2SeqParams& params, const Sentence& source) {
  if (source.empty()) throw DataError("cannot encode an empty source");
  Tape tape;
  ParamVars p = bind_params(tape, params, false);
  const std::size_t len = source.size();
  EncoderGraph enc = encode_graph(tape, p, params.config, source, 1, len, std::span(&len, 1));
  Annotations out{Tensor::matrix(len, 2 * params.config.hidden_dim), enc.initial_state.value()};
  for (std::size_t i = 0; i < len; ++i) {
    auto row = enc.annotations[i].value().row(0);
    std::copy(row.begin(), row.end(), out.vectors.row(i).begin());
  }
  return out;
}

namespace {

EncoderGraph constant_encoding(Tape& tape, const ParamVars& p, const Tensor& annotations) {
  EncoderGraph enc;
  const std::size_t width = annotations.cols();
  for (std::size_t i = 0; i < annotations.rows(); ++i) {
    auto row = annotations.row(i);
    enc.annotations.push_back(tape.constant(Tensor({1, width}, std::vector<double>(row.begin(), row.end()))));
    if (width != p[kAttnAnnotation].value().rows())
      throw DimensionError("annotation width " + std::to_string(width) + " does not match the model");
    enc.projected.push_back(matmul(enc.annotations.back(), p[kAttnAnnotation]));
  }
  enc.score_mask = tape.constant(Tensor::matrix(1, annotations.rows()));
  return enc;
}

}  // namespace

Attention attend(const Seq2SeqParams& params, const Tensor& state, const Tensor& annotations) {
  Tape tape;
  ParamVars p = bind_params(tape, params, false);
  EncoderGraph enc = constant_encoding(tape, p, annotations);
  AttentionGraph att = attend_graph(p, tape.constant(state), enc);
  return {att.context.value(), att.weights.value()};
}

DecodeStep decode_step(const Seq2SeqParams& params, Token previous, const Tensor& state, const Tensor& annotations) {
  Tape tape;
  ParamVars p = bind_params(tape, params, false);
  EncoderGraph enc = constant_encoding(tape, p, annotations);
  StepGraph step = decode_step_graph(p, params.config, std::span(&previous, 1), tape.constant(state), enc);
  return {step.state.value(), kernels::softmax_rows(step.logits.value()), step.weights.value()};
}

Tensor ForwardTrace::distributions() const { return kernels::softmax_rows(logits.value()); }

ForwardTrace forward_teacher_forced(Tape& tape, const ParamVars& p, const Seq2SeqConfig& config,
                                    const Batch& batch) {
  if (batch.batch == 0) throw DataError("empty batch");
  if (batch.target.size() != batch.batch * batch.target_width || batch.target_lengths.size() != batch.batch)
    throw DataError("target batch shape mismatch");
  if (batch.target_width > config.max_target_length) throw DataError("target longer than the model maximum");
  check_tokens(batch.target, config.target_vocab, "target");
  EncoderGraph enc = encode_graph(tape, p, config, batch.source, batch.batch, batch.source_width,
                                  batch.source_lengths);
  ForwardTrace trace;
  std::vector<Var> step_logits;
  Var state = enc.initial_state;
  std::vector<Token> previous(batch.batch, kBos);
  for (std::size_t j = 0; j < batch.target_width; ++j) {
    StepGraph step = decode_step_graph(p, config, previous, state, enc);
    step_logits.push_back(step.logits);
    trace.attention.push_back(step.weights.value());
    state = step.state;
    for (std::size_t b = 0; b < batch.batch; ++b) {
      const Token t = batch.target_at(b, j);
      previous[b] = t == kPad ? kEos : t;
    }
  }
  Var stacked = concat(step_logits, 0);
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const std::size_t len = batch.target_lengths[b];
    if (len == 0 || len > batch.target_width) throw DataError("target length out of range");
    for (std::size_t j = 0; j < len; ++j) {
      rows.push_back(j * batch.batch + b);
      trace.targets.push_back(batch.target_at(b, j));
      trace.sentence.push_back(b);
      trace.position.push_back(j);
      trace.weights.push_back(1.0 / (static_cast<double>(len) * static_cast<double>(batch.batch)));
    }
  }
  trace.logits = gather(stacked, rows);
  return trace;
}

double score_sequence(const Seq2SeqParams& params, const Sentence& source, const Sentence& tokens) {
  if (tokens.empty()) return 0.0;
  Tape tape;
  ParamVars p = bind_params(tape, params, false);
  const std::size_t len = source.size();
  EncoderGraph enc = encode_graph(tape, p, params.config, source, 1, len, std::span(&len, 1));
  Var state = enc.initial_state;
  Token previous = kBos;
  double total = 0.0;
  for (Token t : tokens) {
    StepGraph step = decode_step_graph(p, params.config, std::span(&previous, 1), state, enc);
    const Tensor lp = kernels::log_softmax_rows(step.logits.value());
    if (t >= lp.cols()) throw DataError("scored token outside the target vocabulary");
    total += lp[t];
    state = step.state;
    previous = t;
  }
  return total;
}

}  // namespace dsdlab
