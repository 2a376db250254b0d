#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "dsdlab/corpus.hpp"
#include "dsdlab/tape.hpp"
#include "dsdlab/tensor.hpp"

namespace dsdlab {

struct Seq2SeqConfig {
  std::size_t source_vocab = 32;
  std::size_t target_vocab = 32;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;     // per encoder direction, and decoder state
  std::size_t attention_dim = 64;
  std::size_t max_source_length = 32;
  std::size_t max_target_length = 32;  // including EOS
  std::uint64_t seed = 1;
  double init_scale = 0.08;

  void validate() const;
};

// Parameter blocks, in checkpoint order.
enum ParamId : std::size_t {
  kSourceEmbedding,
  kTargetEmbedding,
  kEncFwdZ, kEncFwdZBias, kEncFwdR, kEncFwdRBias, kEncFwdN, kEncFwdNBias,
  kEncBwdZ, kEncBwdZBias, kEncBwdR, kEncBwdRBias, kEncBwdN, kEncBwdNBias,
  kDecZ, kDecZBias, kDecR, kDecRBias, kDecN, kDecNBias,
  kInitState, kInitStateBias,
  kAttnState, kAttnAnnotation, kAttnBias, kAttnScore,
  kOutput, kOutputBias,
  kParamCount
};

std::string_view param_name(ParamId id);

using ParamTensors = std::vector<Tensor>;

struct Seq2SeqParams {
  Seq2SeqConfig config;
  ParamTensors tensors;  // indexed by ParamId

  Tensor& operator[](ParamId id) { return tensors[id]; }
  const Tensor& operator[](ParamId id) const { return tensors[id]; }
  std::size_t parameter_count() const;
};

// Shapes every block must have for `config`.
std::vector<std::vector<std::size_t>> param_shapes(const Seq2SeqConfig& config);

// Seeded uniform in [-init_scale, init_scale].
Seq2SeqParams init_params(const Seq2SeqConfig& config);

// Throws DimensionError on any shape disagreement with the config.
void check_params(const Seq2SeqParams& params);

// ---- Graph-level building blocks (operate on a tape, batched by rows) ----

struct ParamVars {
  std::array<Var, kParamCount> vars;
  Var operator[](ParamId id) const { return vars[id]; }
};

// Trainable params become leaves; otherwise constants.
ParamVars bind_params(Tape& tape, const Seq2SeqParams& params, bool trainable);

struct EncoderGraph {
  std::vector<Var> annotations;  // per source position, [batch x 2H]
  std::vector<Var> projected;    // annotations times the attention matrix, [batch x A]
  Var initial_state;             // [batch x H]
  Var score_mask;                // [batch x m] 0 / -1e30, valid when has_padding
  bool has_padding = false;
};

// `source` is row-major [batch x width]; lengths give the unpadded extents.
EncoderGraph encode_graph(Tape& tape, const ParamVars& p, const Seq2SeqConfig& config,
                          std::span<const Token> source, std::size_t batch, std::size_t width,
                          std::span<const std::size_t> lengths);

// Repeats row `row` of a batch-1 encoding `copies` times (beam expansion).
EncoderGraph replicate(const EncoderGraph& enc, std::size_t copies);

struct AttentionGraph {
  Var context;  // [batch x 2H]
  Var weights;  // [batch x m]
};

AttentionGraph attend_graph(const ParamVars& p, Var state, const EncoderGraph& enc);

struct StepGraph {
  Var state;    // s_j
  Var logits;   // [batch x V]
  Var weights;  // alpha_j
};

StepGraph decode_step_graph(const ParamVars& p, const Seq2SeqConfig& config, std::span<const Token> previous,
                            Var state, const EncoderGraph& enc);

// ---- Value-level API for single sentences ----

struct Annotations {
  Tensor vectors;        // [m x 2H], row i = [forward_i ; backward_i]
  Tensor initial_state;  // [1 x H]
};

Annotations encode(const Seq2SeqParams& params, const Sentence& source);

struct Attention {
  Tensor context;  // [1 x 2H]
  Tensor weights;  // [1 x m]
};

Attention attend(const Seq2SeqParams& params, const Tensor& state, const Tensor& annotations);

struct DecodeStep {
  Tensor state;      // [1 x H]
  Tensor probs;      // [1 x V]
  Tensor attention;  // [1 x m]
};

DecodeStep decode_step(const Seq2SeqParams& params, Token previous, const Tensor& state,
                       const Tensor& annotations);

// ---- Teacher-forced batch forward ----

struct ForwardTrace {
  Var logits;                          // [N x V], non-PAD positions ordered by (example, step)
  std::vector<std::size_t> targets;    // gold id per row
  std::vector<std::size_t> sentence;   // batch row per row
  std::vector<std::size_t> position;   // decoder step per row
  std::vector<double> weights;         // 1 / (len * batch) per row
  std::vector<Tensor> attention;       // per decoder step, [batch x m]

  Tensor distributions() const;
};

ForwardTrace forward_teacher_forced(Tape& tape, const ParamVars& p, const Seq2SeqConfig& config,
                                    const Batch& batch);

// Sum of log p(token_j | token_<j, source) over `tokens` exactly as given.
double score_sequence(const Seq2SeqParams& params, const Sentence& source, const Sentence& tokens);

}  // namespace dsdlab
