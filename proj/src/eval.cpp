#include "dsdlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "dsdlab/error.hpp"

namespace dsdlab {

namespace {

std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

using NgramCounts = std::map<std::vector<Token>, std::size_t>;

NgramCounts count_ngrams(const Sentence& s, std::size_t n) {
  NgramCounts counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[std::vector<Token>(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

// P(X <= k) for X ~ Binomial(n, 1/2).
double binomial_lower_tail(std::size_t n, std::size_t k) {
  if (n <= 1000) {
    double pmf = std::ldexp(1.0, -static_cast<int>(n));
    double total = 0.0;
    for (std::size_t i = 0; i <= k; ++i) {
      total += pmf;
      pmf = pmf * static_cast<double>(n - i) / static_cast<double>(i + 1);
    }
    return total;
  }
  const double nd = static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    const double id = static_cast<double>(i);
    total += std::exp(std::lgamma(nd + 1) - std::lgamma(id + 1) - std::lgamma(nd - id + 1) - nd * std::log(2.0));
  }
  return total;
}

}  // namespace

DecodeMode parse_decode_mode(std::string_view name) {
  if (name == "greedy") return DecodeMode::Greedy;
  if (name == "beam") return DecodeMode::Beam;
  throw ConfigError("unknown decode mode '" + std::string(name) + "'");
}

std::string_view decode_mode_name(DecodeMode mode) { return mode == DecodeMode::Greedy ? "greedy" : "beam"; }

void DecodeConfig::validate() const {
  if (beam < 1) throw ConfigError("beam width must be at least 1");
  if (mode == DecodeMode::Greedy && beam != 1) throw ConfigError("greedy decoding uses beam width 1");
  if (max_length < 1) throw ConfigError("decode max_length must be at least 1");
  if (!(length_penalty >= 0.0)) throw ConfigError("length penalty must be nonnegative");
}

double Hypothesis::score(double length_penalty) const {
  if (length_penalty == 0.0 || tokens.empty()) return log_prob;
  return log_prob / std::pow(static_cast<double>(tokens.size()), length_penalty);
}

std::vector<Hypothesis> greedy_decode_batch(const Seq2SeqParams& params, const std::vector<Sentence>& sources,
                                            const DecodeConfig& config, std::size_t batch_size) {
  if (config.max_length < 1) throw ConfigError("decode max_length must be at least 1");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  std::vector<Hypothesis> out(sources.size());
  for (std::size_t start = 0; start < sources.size(); start += batch_size) {
    const std::size_t end = std::min(sources.size(), start + batch_size);
    const std::size_t b = end - start;
    std::size_t width = 0;
    for (std::size_t i = start; i < end; ++i) {
      if (sources[i].empty()) throw DataError("cannot decode an empty source");
      width = std::max(width, sources[i].size());
    }
    std::vector<Token> src(b * width, kPad);
    std::vector<std::size_t> lengths(b);
    for (std::size_t r = 0; r < b; ++r) {
      std::copy(sources[start + r].begin(), sources[start + r].end(), src.begin() + static_cast<std::ptrdiff_t>(r * width));
      lengths[r] = sources[start + r].size();
    }
    Tape tape;
    ParamVars p = bind_params(tape, params, false);
    EncoderGraph enc = encode_graph(tape, p, params.config, src, b, width, lengths);
    Var state = enc.initial_state;
    std::vector<Token> previous(b, kBos);
    std::size_t open = b;
    for (std::size_t step = 0; step < config.max_length && open > 0; ++step) {
      StepGraph g = decode_step_graph(p, params.config, previous, state, enc);
      const Tensor lp = kernels::log_softmax_rows(g.logits.value());
      for (std::size_t r = 0; r < b; ++r) {
        Hypothesis& h = out[start + r];
        if (h.finished) continue;
        const std::size_t tok = argmax_lowest(lp.row(r));
        h.tokens.push_back(tok);
        h.log_prob += lp(r, tok);
        previous[r] = tok;
        if (tok == kEos) {
          h.finished = true;
          --open;
        }
      }
      state = g.state;
    }
  }
  return out;
}

Hypothesis greedy_decode(const Seq2SeqParams& params, const Sentence& source, const DecodeConfig& config) {
  return greedy_decode_batch(params, {source}, config, 1).front();
}

std::vector<Hypothesis> beam_decode(const Seq2SeqParams& params, const Sentence& source, const DecodeConfig& config) {
  if (config.beam < 1) throw ConfigError("beam width must be at least 1");
  if (config.max_length < 1) throw ConfigError("decode max_length must be at least 1");
  if (source.empty()) throw DataError("cannot decode an empty source");
  Tape tape;
  ParamVars p = bind_params(tape, params, false);
  const std::size_t len = source.size();
  EncoderGraph enc1 = encode_graph(tape, p, params.config, source, 1, len, std::span(&len, 1));
  std::map<std::size_t, EncoderGraph> replicas;
  auto encoding_for = [&](std::size_t rows) -> const EncoderGraph& {
    if (rows == 1) return enc1;
    auto it = replicas.find(rows);
    if (it == replicas.end()) it = replicas.emplace(rows, replicate(enc1, rows)).first;
    return it->second;
  };

  struct Live {
    Sentence tokens;
    double log_prob;
  };
  std::vector<Live> live{{{}, 0.0}};
  Var states = enc1.initial_state;
  std::vector<Hypothesis> pool;

  for (std::size_t step = 0; step < config.max_length && !live.empty(); ++step) {
    std::vector<Token> previous;
    for (const Live& h : live) previous.push_back(h.tokens.empty() ? kBos : h.tokens.back());
    StepGraph g = decode_step_graph(p, params.config, previous, states, encoding_for(live.size()));
    const Tensor lp = kernels::log_softmax_rows(g.logits.value());

    struct Candidate {
      double score;
      double step;
      std::size_t parent;
      Token token;
    };
    std::vector<Candidate> candidates;
    candidates.reserve(live.size() * lp.cols());
    for (std::size_t l = 0; l < live.size(); ++l)
      for (Token k = 0; k < lp.cols(); ++k) candidates.push_back({live[l].log_prob + lp(l, k), lp(l, k), l, k});
    const std::size_t keep = std::min(config.beam, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        if (a.step != b.step) return a.step > b.step;
                        return a.token < b.token;
                      });

    std::vector<Live> next;
    std::vector<std::size_t> parents;
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = candidates[c];
      Sentence tokens = live[cand.parent].tokens;
      tokens.push_back(cand.token);
      if (cand.token == kEos) {
        pool.push_back({std::move(tokens), cand.score, true});
      } else {
        next.push_back({std::move(tokens), cand.score});
        parents.push_back(cand.parent);
      }
    }
    live = std::move(next);
    if (!live.empty()) states = gather(g.state, parents);
  }
  for (Live& h : live) pool.push_back({std::move(h.tokens), h.log_prob, false});

  std::stable_sort(pool.begin(), pool.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    return a.score(config.length_penalty) > b.score(config.length_penalty);
  });
  return pool;
}

Hypothesis decode(const Seq2SeqParams& params, const Sentence& source, const DecodeConfig& config) {
  config.validate();
  if (config.mode == DecodeMode::Greedy) return greedy_decode(params, source, config);
  return beam_decode(params, source, config).front();
}

std::vector<Sentence> decode_corpus(const Seq2SeqParams& params, const std::vector<Sentence>& sources,
                                    const DecodeConfig& config) {
  config.validate();
  std::vector<Sentence> out;
  out.reserve(sources.size());
  if (config.mode == DecodeMode::Greedy) {
    for (auto& h : greedy_decode_batch(params, sources, config)) out.push_back(strip_eos(h.tokens));
  } else {
    for (const auto& s : sources) out.push_back(strip_eos(beam_decode(params, s, config).front().tokens));
  }
  return out;
}

Sentence strip_eos(const Sentence& tokens) {
  Sentence out = tokens;
  if (!out.empty() && out.back() == kEos) out.pop_back();
  return out;
}

BleuReport corpus_bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                       std::size_t max_n, BleuSmoothing smoothing) {
  if (hypotheses.size() != references.size())
    throw DataError("BLEU needs one reference per hypothesis (" + std::to_string(hypotheses.size()) + " vs " +
                    std::to_string(references.size()) + ")");
  if (max_n < 1) throw ConfigError("BLEU max_n must be at least 1");
  BleuReport r;
  r.matches.assign(max_n, 0);
  r.totals.assign(max_n, 0);
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    r.hypothesis_length += hypotheses[s].size();
    r.reference_length += references[s].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const NgramCounts hyp = count_ngrams(hypotheses[s], n);
      const NgramCounts ref = count_ngrams(references[s], n);
      for (const auto& [gram, count] : hyp) {
        auto it = ref.find(gram);
        if (it != ref.end()) r.matches[n - 1] += std::min(count, it->second);
        r.totals[n - 1] += count;
      }
    }
  }
  r.precisions.resize(max_n);
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < max_n; ++n) {
    double m = static_cast<double>(r.matches[n]);
    double t = static_cast<double>(r.totals[n]);
    if (smoothing == BleuSmoothing::AddOne && n >= 1) {
      m += 1.0;
      t += 1.0;
    }
    r.precisions[n] = t > 0.0 ? m / t : 0.0;
    if (r.precisions[n] <= 0.0) zero = true;
    else log_sum += std::log(r.precisions[n]);
  }
  const double c = static_cast<double>(r.hypothesis_length);
  const double ref_len = static_cast<double>(r.reference_length);
  if (c == 0.0) r.brevity_penalty = 0.0;
  else r.brevity_penalty = c < ref_len ? std::exp(1.0 - ref_len / c) : 1.0;
  r.score = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  return r;
}

double sentence_bleu(const Sentence& hypothesis, const Sentence& reference, std::size_t max_n) {
  return corpus_bleu({hypothesis}, {reference}, max_n, BleuSmoothing::AddOne).score;
}

SignTestResult sign_test(const std::vector<double>& scores_a, const std::vector<double>& scores_b) {
  if (scores_a.size() != scores_b.size()) throw DataError("sign test needs paired score lists of equal length");
  SignTestResult r;
  for (std::size_t i = 0; i < scores_a.size(); ++i) {
    if (scores_a[i] > scores_b[i]) ++r.wins;
    else if (scores_a[i] < scores_b[i]) ++r.losses;
    else ++r.ties;
  }
  const std::size_t n = r.wins + r.losses;
  if (n == 0) return r;
  r.p_value = std::min(1.0, 2.0 * binomial_lower_tail(n, std::min(r.wins, r.losses)));
  return r;
}

SignTestResult paired_sign_test(const std::vector<Sentence>& system_a, const std::vector<Sentence>& system_b,
                                const std::vector<Sentence>& references) {
  if (system_a.size() != references.size() || system_b.size() != references.size())
    throw DataError("sign test inputs must cover the same sentences");
  std::vector<double> a, b;
  for (std::size_t i = 0; i < references.size(); ++i) {
    a.push_back(sentence_bleu(system_a[i], references[i]));
    b.push_back(sentence_bleu(system_b[i], references[i]));
  }
  return sign_test(a, b);
}

}  // namespace dsdlab
