#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>

#include "dsdlab/error.hpp"
#include "dsdlab/eval.hpp"
#include "dsdlab/rng.hpp"
#include "dsdlab/seq2seq.hpp"

using namespace dsdlab;

namespace {

Seq2SeqConfig small_model(std::size_t vocab, std::uint64_t seed) {
  Seq2SeqConfig c;
  c.source_vocab = 8;
  c.target_vocab = vocab;
  c.embed_dim = 3;
  c.hidden_dim = 4;
  c.attention_dim = 3;
  c.max_source_length = 6;
  c.max_target_length = 8;
  c.seed = seed;
  c.init_scale = 1.5;  // peaked distributions make the search nontrivial
  return c;
}

Sentence random_source(Rng& rng, std::size_t vocab) {
  Sentence s(1 + rng.below(4));
  for (Token& t : s) t = kFirstContent + rng.below(vocab - kFirstContent);
  return s;
}

// Every output the search space admits: EOS-terminated sequences of length
// <= L, plus length-L sequences without EOS.
void enumerate(std::size_t vocab, std::size_t max_len, Sentence& prefix, const std::function<void(const Sentence&)>& f) {
  for (Token t = 0; t < vocab; ++t) {
    prefix.push_back(t);
    if (t == kEos || prefix.size() == max_len) f(prefix);
    else enumerate(vocab, max_len, prefix, f);
    prefix.pop_back();
  }
}

}  // namespace

TEST_CASE("decode config validation") {
  DecodeConfig d;
  d.beam = 0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  DecodeConfig g;
  g.beam = 3;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  const Seq2SeqParams p = init_params(small_model(6, 1));
  DecodeConfig b;
  b.mode = DecodeMode::Beam;
  b.beam = 0;
  CHECK_THROWS_AS(beam_decode(p, {4}, b), ConfigError);
  CHECK(parse_decode_mode("beam") == DecodeMode::Beam);
}

TEST_CASE("uniform model repeats the first vocabulary id") {
  Seq2SeqParams p = init_params(small_model(6, 1));
  for (auto& t : p.tensors) t = Tensor(t.shape());
  DecodeConfig d;
  d.max_length = 5;
  const Hypothesis h = greedy_decode(p, {4, 5}, d);
  CHECK(h.tokens == Sentence(5, 0));
  CHECK_FALSE(h.finished);
  CHECK(h.log_prob == doctest::Approx(5 * std::log(1.0 / 6)).epsilon(1e-12));
}

TEST_CASE("beam of one equals greedy on random inputs") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Seq2SeqParams p = init_params(small_model(6, 100 + i % 10));
    const Sentence src = random_source(rng, 8);
    DecodeConfig g;
    g.max_length = 6;
    DecodeConfig b = g;
    b.mode = DecodeMode::Beam;
    const Hypothesis gh = greedy_decode(p, src, g);
    const Hypothesis bh = beam_decode(p, src, b).front();
    CHECK(gh.tokens == bh.tokens);
    CHECK(gh.log_prob == bh.log_prob);
  }
}

TEST_CASE("batched greedy equals per-sentence greedy") {
  Rng rng(4);
  const Seq2SeqParams p = init_params(small_model(7, 9));
  std::vector<Sentence> sources;
  for (int i = 0; i < 23; ++i) sources.push_back(random_source(rng, 8));
  DecodeConfig d;
  d.max_length = 7;
  const auto batched = greedy_decode_batch(p, sources, d, 5);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const Hypothesis one = greedy_decode(p, sources[i], d);
    CHECK(one.tokens == batched[i].tokens);
    CHECK(one.log_prob == batched[i].log_prob);
  }
}

TEST_CASE("full-width beam equals exhaustive enumeration") {
  Rng rng(5);
  auto run = [&](std::size_t vocab, std::size_t max_len, std::size_t beam, int models) {
    for (int m = 0; m < models; ++m) {
      const Seq2SeqParams p = init_params(small_model(vocab, 500 + m));
      const Sentence src = random_source(rng, 8);
      Sentence best, prefix;
      double best_lp = -INFINITY;
      enumerate(vocab, max_len, prefix, [&](const Sentence& s) {
        const double lp = score_sequence(p, src, s);
        if (lp > best_lp) {
          best_lp = lp;
          best = s;
        }
      });
      DecodeConfig d;
      d.mode = DecodeMode::Beam;
      d.beam = beam;
      d.max_length = max_len;
      const Hypothesis top = beam_decode(p, src, d).front();
      CHECK(top.tokens == best);
      CHECK(top.log_prob == doctest::Approx(best_lp).epsilon(1e-9));
    }
  };
  run(4, 2, 16, 50);
  run(5, 3, 125, 50);
}

TEST_CASE("hypothesis log-probabilities recompute from the model") {
  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    const Seq2SeqParams p = init_params(small_model(6, 40 + i));
    const Sentence src = random_source(rng, 8);
    DecodeConfig d;
    d.mode = DecodeMode::Beam;
    d.beam = 4;
    d.max_length = 5;
    for (const Hypothesis& h : beam_decode(p, src, d))
      CHECK(std::abs(h.log_prob - score_sequence(p, src, h.tokens)) < 1e-9);
    DecodeConfig g;
    g.max_length = 5;
    const Hypothesis gh = greedy_decode(p, src, g);
    CHECK(std::abs(gh.log_prob - score_sequence(p, src, gh.tokens)) < 1e-9);
  }
}

TEST_CASE("top beam score does not drop as the beam widens on a fixed input") {
  const Seq2SeqParams p = init_params(small_model(6, 77));
  const Sentence src{4, 6, 5};
  double previous = -INFINITY;
  for (std::size_t b : {1, 2, 4, 8}) {
    DecodeConfig d;
    d.mode = DecodeMode::Beam;
    d.beam = b;
    d.max_length = 6;
    const double score = beam_decode(p, src, d).front().log_prob;
    CHECK(score >= previous);
    previous = score;
  }
}

TEST_CASE("length penalty ranks by normalized score") {
  Hypothesis a{{4, kEos}, -2.0, true}, b{{4, 5, 6, kEos}, -3.0, true};
  CHECK(a.score(0.0) > b.score(0.0));
  CHECK(a.score(1.0) < b.score(1.0));
}

TEST_CASE("corpus bleu") {
  const std::vector<Sentence> refs{{4, 5, 6, 7, 8}, {9, 10, 11, 12}};
  const BleuReport same = corpus_bleu(refs, refs);
  CHECK(same.score == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(same.brevity_penalty == 1.0);

  const std::vector<Sentence> disjoint{{20, 21, 22, 23, 24}, {25, 26, 27, 28}};
  CHECK(corpus_bleu(disjoint, refs).score == 0.0);

  // Hand count: p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0/1.
  const std::vector<Sentence> h{{1, 2, 3, 4}}, r{{1, 2, 3, 5}};
  const BleuReport plain = corpus_bleu(h, r);
  CHECK(plain.matches == std::vector<std::size_t>{3, 2, 1, 0});
  CHECK(plain.totals == std::vector<std::size_t>{4, 3, 2, 1});
  CHECK(plain.score == 0.0);
  const BleuReport smooth = corpus_bleu(h, r, 4, BleuSmoothing::AddOne);
  const double oracle = 100.0 * std::exp((std::log(3.0 / 4) + std::log(3.0 / 4) + std::log(2.0 / 3) + std::log(1.0 / 2)) / 4);
  CHECK(std::abs(smooth.score - oracle) < 1e-9);
  CHECK(std::abs(sentence_bleu(h[0], r[0]) - oracle) < 1e-9);

  // Brevity: c = 3 against r = 5.
  const std::vector<Sentence> shortest{{4, 5, 6}}, longer{{4, 5, 6, 7, 8}};
  const BleuReport brief = corpus_bleu(shortest, longer, 2);
  CHECK(brief.brevity_penalty == doctest::Approx(std::exp(1.0 - 5.0 / 3.0)).epsilon(1e-14));
  CHECK(brief.score == doctest::Approx(100.0 * std::exp(1.0 - 5.0 / 3.0)).epsilon(1e-12));

  CHECK_THROWS_AS(corpus_bleu(h, refs), DataError);
}

TEST_CASE("corpus bleu is invariant under corpus permutation") {
  Rng rng(8);
  std::vector<Sentence> hyp, ref;
  for (int i = 0; i < 30; ++i) {
    Sentence a(4 + rng.below(4)), b(4 + rng.below(4));
    for (Token& t : a) t = 4 + rng.below(5);
    for (Token& t : b) t = 4 + rng.below(5);
    hyp.push_back(a);
    ref.push_back(b);
  }
  const double base = corpus_bleu(hyp, ref).score;
  for (int i = 29; i > 0; --i) {
    const std::size_t j = rng.below(i + 1);
    std::swap(hyp[i], hyp[j]);
    std::swap(ref[i], ref[j]);
  }
  CHECK(corpus_bleu(hyp, ref).score == doctest::Approx(base).epsilon(1e-12));
  CHECK(base < 100.0);
}

TEST_CASE("sign test") {
  const std::vector<double> ten_a(10, 1.0), ten_b(10, 0.0);
  CHECK(std::abs(sign_test(ten_a, ten_b).p_value - 2.0 * std::pow(0.5, 10)) < 1e-12);
  CHECK(sign_test(ten_a, ten_b).wins == 10);

  std::vector<double> a{1, 1, 1, 1, 1, 0, 0, 0, 0, 0}, b{0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
  CHECK(sign_test(a, b).p_value == 1.0);
  CHECK(sign_test(a, a).p_value == 1.0);
  CHECK(sign_test(a, a).ties == 10);
  CHECK_THROWS_AS(sign_test(a, std::vector<double>{1.0}), DataError);

  // Binomial tail from Pascal's triangle.
  for (std::size_t n : {1, 7, 20, 60}) {
    std::vector<long double> row{1.0L};
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<long double> next(row.size() + 1, 0.0L);
      for (std::size_t k = 0; k < row.size(); ++k) {
        next[k] += row[k];
        next[k + 1] += row[k];
      }
      row = next;
    }
    const long double total = std::pow(2.0L, static_cast<long double>(n));
    for (std::size_t wins = 0; wins <= n; ++wins) {
      const std::size_t lo = std::min(wins, n - wins);
      long double tail = 0.0L;
      for (std::size_t k = 0; k <= lo; ++k) tail += row[k];
      const double want = std::min(1.0L, 2.0L * tail / total);
      std::vector<double> x(n, 0.0), y(n, 0.0);
      for (std::size_t i = 0; i < wins; ++i) x[i] = 1.0;
      for (std::size_t i = wins; i < n; ++i) y[i] = 1.0;
      CHECK(sign_test(x, y).p_value == doctest::Approx(want).epsilon(1e-10));
    }
  }
  std::vector<double> big_a(2000, 0.0), big_b(2000, 0.0);
  for (std::size_t i = 0; i < 2000; ++i) (i < 1100 ? big_a : big_b)[i] = 1.0;
  const double p = sign_test(big_a, big_b).p_value;
  CHECK(p > 0.0);
  CHECK(p < 1e-4);
}

TEST_CASE("paired sign test on decodes") {
  const std::vector<Sentence> refs{{4, 5, 6, 7}, {8, 9, 10, 11}, {4, 4, 5, 5}};
  const std::vector<Sentence> good = refs;
  const std::vector<Sentence> bad{{4, 5, 9, 9}, {8, 9, 10, 11}, {6, 6, 6, 6}};
  const SignTestResult r = paired_sign_test(good, bad, refs);
  CHECK(r.wins == 2);
  CHECK(r.losses == 0);
  CHECK(r.ties == 1);
  CHECK(r.p_value == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("strip_eos") {
  CHECK(strip_eos({4, 5, kEos}) == Sentence{4, 5});
  CHECK(strip_eos({4, 5}) == Sentence{4, 5});
}
