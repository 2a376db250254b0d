#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "dsdlab/corpus.hpp"
#include "dsdlab/seq2seq.hpp"

namespace dsdlab {

enum class DecodeMode { Greedy, Beam };

DecodeMode parse_decode_mode(std::string_view name);
std::string_view decode_mode_name(DecodeMode mode);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::Greedy;
  std::size_t beam = 1;
  std::size_t max_length = 32;   // emitted tokens, EOS included
  double length_penalty = 0.0;   // final score = log p / len^length_penalty

  void validate() const;
};

struct Hypothesis {
  Sentence tokens;  // ends in EOS unless truncated at max_length
  double log_prob = 0.0;
  bool finished = false;

  double score(double length_penalty) const;
};

// Argmax per step; ties go to the lowest token id.
Hypothesis greedy_decode(const Seq2SeqParams& params, const Sentence& source, const DecodeConfig& config);

// Row-batched greedy decoding; each result equals greedy_decode on its source.
std::vector<Hypothesis> greedy_decode_batch(const Seq2SeqParams& params, const std::vector<Sentence>& sources,
                                            const DecodeConfig& config, std::size_t batch_size = 64);

// Length-synchronous beam search. Each step keeps the `beam` best expansions
// of the live hypotheses; expansions ending in EOS leave the beam as finished.
// Returns every finished or truncated hypothesis, best first.
std::vector<Hypothesis> beam_decode(const Seq2SeqParams& params, const Sentence& source, const DecodeConfig& config);

// Dispatches on config.mode and returns the top hypothesis.
Hypothesis decode(const Seq2SeqParams& params, const Sentence& source, const DecodeConfig& config);
std::vector<Sentence> decode_corpus(const Seq2SeqParams& params, const std::vector<Sentence>& sources,
                                    const DecodeConfig& config);

// Drops a trailing EOS.
Sentence strip_eos(const Sentence& tokens);

enum class BleuSmoothing { None, AddOne };

struct BleuReport {
  double score = 0.0;
  std::vector<double> precisions;
  std::vector<std::size_t> matches;
  std::vector<std::size_t> totals;
  double brevity_penalty = 1.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

// Clipped n-gram precisions, geometric mean over n = 1..max_n, brevity
// penalty exp(1 - r/c) when c < r. AddOne smoothing applies to n >= 2.
BleuReport corpus_bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                       std::size_t max_n = 4, BleuSmoothing smoothing = BleuSmoothing::None);

double sentence_bleu(const Sentence& hypothesis, const Sentence& reference, std::size_t max_n = 4);

struct SignTestResult {
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t ties = 0;
  double p_value = 1.0;
};

// Two-sided exact binomial test on wins of a over b, ties dropped.
SignTestResult sign_test(const std::vector<double>& scores_a, const std::vector<double>& scores_b);

// Per-sentence smoothed BLEU for both systems, then the sign test.
SignTestResult paired_sign_test(const std::vector<Sentence>& system_a, const std::vector<Sentence>& system_b,
                                const std::vector<Sentence>& references);

}  // namespace dsdlab
